"""Plain-text key-value run configuration with strict schema validation.

Format: `[section]` headers followed by `key = value` lines; `#` starts a
comment. Unknown sections or keys are rejected with their full key path.
Command-line overrides use `section.key=value` and win over the file.
"""

from __future__ import annotations

import hashlib

_BOOL = {"true": True, "false": False, "yes": True, "no": False,
         "1": True, "0": False}


class ConfigError(ValueError):
    pass


def _coerce(section, key, value, kind):
    try:
        if kind is bool:
            if value.lower() not in _BOOL:
                raise ValueError
            return _BOOL[value.lower()]
        return kind(value)
    except ValueError:
        raise ConfigError(
            f"{section}.{key}: cannot parse {value!r} as {kind.__name__}"
        ) from None


SCHEMA = {
    "run": {"seed": int},
    "network": {"preset": str, "classes": int, "branches": str,
                "dynamic": bool, "spec_file": str, "mlp_tail": bool,
                "n_mlp": int},
    "data": {"root": str, "train_split": str, "eval_split": str,
             "synthetic": str, "n_train": int, "n_test": int, "seed": int},
    "train": {"iterations": int, "batch_size": int, "lr": float,
              "weight_decay": float, "smoothing": float, "augment": str,
              "kd_logits": str, "kd_weight": float},
    "train2": {"iterations": int, "batch_size": int, "lr": float,
               "weight_decay": float, "smoothing": float, "augment": str,
               "kd_logits": str, "kd_weight": float},
    "sweep": {"points": str, "band": float, "train": bool},
}

DEFAULTS = {
    "run": {"seed": 0},
    "network": {"preset": "desk-tiny", "classes": 10,
                "branches": "point,short,long", "dynamic": False,
                "spec_file": "", "mlp_tail": False, "n_mlp": 0},
    "data": {"root": "", "train_split": "train", "eval_split": "test",
             "synthetic": "none", "n_train": 4000, "n_test": 1000, "seed": 0},
    "train": {"iterations": 500, "batch_size": 64, "lr": 2e-3,
              "weight_decay": 1e-5, "smoothing": 0.1, "augment": "roll",
              "kd_logits": "", "kd_weight": 0.0},
    "train2": {"iterations": 500, "batch_size": 64, "lr": 1e-3,
               "weight_decay": 0.0, "smoothing": 0.1, "augment": "roll",
               "kd_logits": "", "kd_weight": 0.0},
    "sweep": {"points": "0,3,6", "band": 0.03, "train": False},
}


def parse_config(text: str) -> dict:
    """Parse and validate; returns {section: {key: typed value}} with
    defaults filled in."""
    cfg = {s: dict(v) for s, v in DEFAULTS.items()}
    present = set()
    section = None
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"line {ln}: unknown section [{section}]")
            present.add(section)
            continue
        if section is None:
            raise ConfigError(f"line {ln}: key outside any section")
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA[section]:
            raise ConfigError(f"line {ln}: unknown key {section}.{key}")
        cfg[section][key] = _coerce(section, key, value, SCHEMA[section][key])
    cfg["__sections__"] = present
    return cfg


def load_config(path) -> dict:
    try:
        with open(path) as f:
            return parse_config(f.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply `section.key=value` strings over a parsed config."""
    for item in overrides or ():
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not section.key=value")
        path, value = item.split("=", 1)
        section, key = path.split(".", 1)
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"override targets unknown key {section}.{key}")
        cfg[section][key] = _coerce(section, key, value.strip(),
                                    SCHEMA[section][key])
        cfg["__sections__"].add(section)
    return cfg


def config_digest(cfg: dict) -> str:
    """Stable hash of the effective configuration (defaults included)."""
    parts = []
    for section in sorted(SCHEMA):
        for key in sorted(SCHEMA[section]):
            parts.append(f"{section}.{key}={cfg[section][key]!r}")
    return hashlib.sha256("\n".join(parts).encode()).hexdigest()
