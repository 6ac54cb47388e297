"""Command-line entry point.

Verbs: train, eval, count-ops, analyze-binerr, sweep, export-spec.
Exit codes: 0 ok, 1 usage error, 2 runtime error. Every artifact-producing
run writes a `<output>.manifest.json` sidecar (config digest, seed,
versions; no timestamps, so reruns are byte-identical).

The dataset root comes from `[data] root`, falling back to the
BITCONTEXT_DATA environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from . import analysis, costmodel, data as dt, network as nw, train as tr
from .config import (ConfigError, apply_overrides, config_digest,
                     load_config, parse_config)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1
        self.exit(1, f"error: {message}\n")


class RuntimeFailure(RuntimeError):
    pass


def _load_cfg(args) -> dict:
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        cfg = parse_config("")
    return apply_overrides(cfg, getattr(args, "set", None))


def _network_spec(cfg) -> nw.NetworkSpec:
    ncfg = cfg["network"]
    if ncfg["spec_file"]:
        try:
            with open(ncfg["spec_file"]) as f:
                return nw.parse_network_spec(f.read())
        except OSError as e:
            raise RuntimeFailure(f"cannot read spec file: {e}") from None
    name = ncfg["preset"]
    kwargs = {"classes": ncfg["classes"]}
    if name in ("desk-tiny", "desk-micro"):
        kwargs["branches"] = tuple(b.strip() for b in ncfg["branches"].split(","))
    if name in ("desk-tiny", "bcdnet-a-like"):
        kwargs["dynamic"] = ncfg["dynamic"]
    if name == "reactnet18-like":
        kwargs["mlp_tail"] = ncfg["mlp_tail"]
    if name == "desk-sweep":
        kwargs["n_mlp"] = ncfg["n_mlp"]
    try:
        return nw.preset(name, **kwargs)
    except nw.SpecError as e:
        raise RuntimeFailure(str(e)) from None


def _dataset_root(cfg) -> str:
    root = cfg["data"]["root"] or os.environ.get("BITCONTEXT_DATA", "")
    if not root:
        raise RuntimeFailure(
            "no dataset root: set [data] root or BITCONTEXT_DATA")
    return root


def _load_data(cfg, split_key):
    root = _dataset_root(cfg)
    dcfg = cfg["data"]
    synth = dcfg["synthetic"]
    if synth != "none" and not os.path.exists(
            os.path.join(root, f"{dcfg['train_split']}.bin")) \
            and not os.path.exists(
            os.path.join(root, f"{dcfg['train_split']}-images.idx")):
        if synth == "pairs32":
            dt.write_synthetic_dir(root, dcfg["n_train"], dcfg["n_test"],
                                   size=32, channels=3, seed=dcfg["seed"])
        elif synth == "pairs16":
            dt.write_synthetic_dir(root, dcfg["n_train"], dcfg["n_test"],
                                   size=16, channels=1, seed=dcfg["seed"])
        else:
            raise RuntimeFailure(f"unknown synthetic dataset {synth!r}")
    try:
        return dt.load_dir(root, dcfg[split_key])
    except (OSError, ValueError) as e:
        raise RuntimeFailure(f"dataset: {e}") from None


def _write_manifest(output, cfg, command):
    manifest = {
        "command": command,
        "config_sha256": config_digest(cfg),
        "seed": cfg["run"]["seed"],
        "bitcontext_version": __version__,
        "numpy_version": np.__version__,
    }
    with open(f"{output}.manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _emit(text, output):
    if output:
        with open(output, "w") as f:
            f.write(text + "\n")
    else:
        print(text)


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    spec = _network_spec(cfg)
    train_data = _load_data(cfg, "train_split")
    seed = cfg["run"]["seed"]
    net = nw.build(spec, seed=seed)
    if args.init:
        try:
            nw.load_into(net, args.init, allow_missing=True)
        except nw.CheckpointError as e:
            raise RuntimeFailure(str(e)) from None
    steps = [int(s) for s in args.steps.split(",")] if args.steps else \
        [1, 2] if "train2" in cfg["__sections__"] or not args.init else [2]
    state = None
    history = []
    for step in steps:
        section = "train" if step == 1 else "train2"
        scfg = cfg[section]
        teacher = None
        if scfg["kd_logits"]:
            try:
                teacher = np.load(scfg["kd_logits"])
            except OSError as e:
                raise RuntimeFailure(f"teacher logits: {e}") from None
            if teacher.shape != (len(train_data), train_data.classes):
                raise RuntimeFailure(
                    f"teacher logits shape {teacher.shape} does not match "
                    f"{len(train_data)} x {train_data.classes}")
        tcfg = tr.TrainConfig(step=step, iterations=scfg["iterations"],
                              batch_size=scfg["batch_size"], lr=scfg["lr"],
                              weight_decay=scfg["weight_decay"],
                              smoothing=scfg["smoothing"], seed=seed + step,
                              augment=scfg["augment"], teacher_logits=teacher,
                              kd_weight=scfg["kd_weight"])
        if step == 1:
            state, res = tr.train_step1(net, train_data, tcfg)
        else:
            state, res = tr.train_step2(net, state, train_data, tcfg)
        history.extend((step, i, v) for i, v in enumerate(res.loss_history))
        last = np.mean(res.loss_history[-10:]) if res.loss_history else float("nan")
        print(f"step {step}: {len(res.loss_history)} iterations, "
              f"final loss {last:.4f}")
    nw.save(net, args.output)
    _write_manifest(args.output, cfg, "train")
    if args.history:
        with open(args.history, "w") as f:
            f.write("step\titeration\tloss\n")
            for step, i, v in history:
                f.write(f"{step}\t{i}\t{v:.8f}\n")
    print(f"checkpoint written to {args.output}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    try:
        net = nw.load(args.checkpoint)
    except nw.CheckpointError as e:
        raise RuntimeFailure(str(e)) from None
    eval_data = _load_data(cfg, "eval_split")
    m = tr.evaluate(net, eval_data, packed=args.packed)
    _emit("\t".join(["top1", "top5", "loss", "n"]) + "\n" +
          f"{m.top1:.6f}\t{m.top5:.6f}\t{m.loss:.6f}\t{m.n}", args.output)
    if args.output:
        _write_manifest(args.output, cfg, "eval")
    return 0


def cmd_count_ops(args) -> int:
    cfg = _load_cfg(args)
    spec = _network_spec(cfg)
    report = costmodel.count_network(spec, mac_ops=args.mac_ops)
    text = report.to_delimited() if args.format == "tsv" else report.to_text()
    _emit(text, args.output)
    if args.output:
        _write_manifest(args.output, cfg, "count-ops")
    return 0


def cmd_analyze_binerr(args) -> int:
    cfg = _load_cfg(args)
    try:
        net = nw.load(args.checkpoint)
    except nw.CheckpointError as e:
        raise RuntimeFailure(str(e)) from None
    try:
        report = analysis.per_branch_report(net, mode=args.mode)
    except ValueError as e:
        raise RuntimeFailure(str(e)) from None
    _emit(report.to_delimited(), args.output)
    if args.output:
        _write_manifest(args.output, cfg, "analyze-binerr")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    points = [int(p) for p in cfg["sweep"]["points"].split(",")]
    band = cfg["sweep"]["band"]
    if "network" in cfg["__sections__"]:
        base_spec = _network_spec(cfg)
    else:  # default sweep base
        base_spec = nw.desk_sweep(classes=cfg["network"]["classes"])
    base = costmodel.count_network(base_spec).ops
    train_data = eval_data = cfg1 = cfg2 = None
    if cfg["sweep"]["train"]:
        train_data = _load_data(cfg, "train_split")
        eval_data = _load_data(cfg, "eval_split")
        s1, s2 = cfg["train"], cfg["train2"]
        cfg1 = tr.TrainConfig(step=1, iterations=s1["iterations"],
                              batch_size=s1["batch_size"], lr=s1["lr"],
                              weight_decay=s1["weight_decay"],
                              smoothing=s1["smoothing"], seed=cfg["run"]["seed"],
                              augment=s1["augment"])
        cfg2 = tr.TrainConfig(step=2, iterations=s2["iterations"],
                              batch_size=s2["batch_size"], lr=s2["lr"],
                              weight_decay=s2["weight_decay"],
                              smoothing=s2["smoothing"],
                              seed=cfg["run"]["seed"] + 1, augment=s2["augment"])
    try:
        rows = tr.sweep_replacement(points, (base * (1 - band), base * (1 + band)),
                                    base_spec=base_spec,
                                    classes=cfg["network"]["classes"],
                                    train_data=train_data, eval_data=eval_data,
                                    cfg1=cfg1, cfg2=cfg2, seed=cfg["run"]["seed"])
    except nw.SpecError as e:
        raise RuntimeFailure(str(e)) from None
    cols = list(rows[0].keys())
    lines = ["\t".join(cols)]
    for r in rows:
        lines.append("\t".join(str(r[c]) for c in cols))
    _emit("\n".join(lines), args.output)
    if args.output:
        _write_manifest(args.output, cfg, "sweep")
    return 0


def cmd_export_spec(args) -> int:
    cfg = _load_cfg(args)
    spec = _network_spec(cfg)
    _emit(spec.to_text().rstrip("\n"), args.output)
    if args.output:
        _write_manifest(args.output, cfg, "export-spec")
    return 0


def build_parser() -> _Parser:
    p = _Parser(prog="bitcontext",
                description="1-bit contextual-dependency network engine")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, output_required=False):
        sp.add_argument("--config", help="key-value config file")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
        sp.add_argument("--output", required=output_required,
                        help="output path (stdout when omitted)")

    sp = sub.add_parser("train", help="run the two-step training pipeline")
    common(sp, output_required=True)
    sp.add_argument("--init", help="initial checkpoint (step-2 / fine-tune)")
    sp.add_argument("--steps", help="comma list of steps to run, e.g. 1,2")
    sp.add_argument("--history", help="write per-iteration losses (TSV)")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--packed", action="store_true",
                    help="use the bit-packed kernels")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("count-ops", help="analytic BOPs/FLOPs/OPs report")
    common(sp)
    sp.add_argument("--mac-ops", type=int, default=1, choices=(1, 2),
                    help="operations counted per multiply-accumulate")
    sp.add_argument("--format", default="text", choices=("text", "tsv"))
    sp.set_defaults(fn=cmd_count_ops)

    sp = sub.add_parser("analyze-binerr", help="per-branch binarization error")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--mode", default="xnor", choices=("xnor", "literal"))
    sp.set_defaults(fn=cmd_analyze_binerr)

    sp = sub.add_parser("sweep", help="conv-vs-MLP replacement sweep")
    common(sp)
    sp.set_defaults(fn=cmd_sweep)

    sp = sub.add_parser("export-spec", help="write a preset's network spec")
    common(sp)
    sp.set_defaults(fn=cmd_export_spec)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (RuntimeFailure, nw.CheckpointError, nw.SpecError, OSError,
            ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
