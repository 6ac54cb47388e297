"""Declarative network specs, builders, presets and checkpoint persistence.

A NetworkSpec is an ordered list of LayerSpecs whose channel/resolution
chain is validated up front. Builders are deterministic: a fixed seed plus
a fixed spec always produces identical parameters.

Checkpoints are single little-endian binary files: magic, format version,
the embedded spec text (so a checkpoint is self-describing), a SHA-256 of
that text, a small metadata block, length-prefixed named tensors, and a
trailing CRC-32 over everything before it.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .blocks import (BRANCH_KINDS, BinaryConvBlock, BinaryMlpBlock, Classifier,
                     ForwardState, StemConv)

LAYER_KINDS = ("stem-conv", "binary-conv-3x3", "binary-conv-1x1", "binary-mlp",
               "downsample", "classifier")

CHECKPOINT_MAGIC = b"BCTX"
CHECKPOINT_VERSION = 1


class SpecError(ValueError):
    """Invalid or inconsistent network specification."""


class CheckpointError(IOError):
    """Base for persistence failures."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


@dataclass
class LayerSpec:
    kind: str
    c_in: int
    c_out: int
    stride: int = 1
    kernel: int = 3
    dynamic: bool = False
    branches: tuple = ("point", "short", "long")
    pool: bool = False

    def validate(self):
        if self.kind not in LAYER_KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}")
        if self.kind == "binary-mlp":
            if self.c_in != self.c_out:
                raise SpecError("binary-mlp must preserve channels")
            if self.c_in % 4 != 0:
                raise SpecError(
                    f"binary-mlp needs channels divisible by 4, got {self.c_in}"
                )
            if len(self.branches) != 3 or any(b not in BRANCH_KINDS
                                              for b in self.branches):
                raise SpecError(f"bad branch assignment {self.branches!r}")
        if self.kind == "binary-conv-3x3" and (self.stride != 1
                                               or self.c_in != self.c_out):
            raise SpecError("binary-conv-3x3 is stride 1 and channel preserving; "
                            "use 'downsample' for strided blocks")
        if self.kind == "binary-conv-1x1" and self.stride != 1:
            raise SpecError("binary-conv-1x1 is stride 1")
        if self.kind == "downsample" and self.stride != 2:
            raise SpecError("downsample blocks use stride 2")
        if self.kind in ("binary-conv-1x1", "downsample") \
                and self.c_out not in (self.c_in, 2 * self.c_in):
            raise SpecError(
                f"{self.kind} supports c_out in {{c_in, 2*c_in}}, "
                f"got {self.c_in} -> {self.c_out}"
            )


@dataclass
class NetworkSpec:
    name: str
    input_hw: tuple
    classes: int
    layers: list = field(default_factory=list)
    in_channels: int = 3

    def validate(self):
        if not self.layers:
            raise SpecError("empty layer list")
        if self.layers[0].kind != "stem-conv":
            raise SpecError("first layer must be the full-precision stem")
        if self.layers[-1].kind != "classifier":
            raise SpecError("last layer must be the full-precision classifier")
        c = self.in_channels
        h, w = self.input_hw
        for i, ls in enumerate(self.layers):
            ls.validate()
            if ls.c_in != c:
                raise SpecError(
                    f"layer {i} ({ls.kind}) expects {ls.c_in} channels, chain has {c}"
                )
            if ls.kind == "binary-mlp" and (h < 2 or w < 2):
                raise SpecError(f"binary-mlp at layer {i} needs h,w >= 2, got {h}x{w}")
            if ls.kind == "classifier":
                if i != len(self.layers) - 1:
                    raise SpecError("classifier must be last")
                c = self.classes
                continue
            if ls.stride == 2 or ls.pool:
                div = 2 * (2 if (ls.stride == 2 and ls.pool) else 1)
                if h % div or w % div:
                    raise SpecError(
                        f"layer {i} downsamples {h}x{w} not divisible by {div}"
                    )
            h = h // ls.stride // (2 if ls.pool else 1)
            w = w // ls.stride // (2 if ls.pool else 1)
            c = ls.c_out
        return self

    # -- plain-text serialization --------------------------------------

    def to_text(self) -> str:
        lines = ["[network]", f"name = {self.name}",
                 f"input = {self.input_hw[0]}x{self.input_hw[1]}",
                 f"in_channels = {self.in_channels}",
                 f"classes = {self.classes}", ""]
        for ls in self.layers:
            lines.append("[layer]")
            lines.append(f"kind = {ls.kind}")
            lines.append(f"out = {ls.c_out}")
            if ls.kind != "classifier":
                lines.append(f"stride = {ls.stride}")
            if ls.kind == "stem-conv":
                lines.append(f"kernel = {ls.kernel}")
                if ls.pool:
                    lines.append("pool = true")
            if ls.dynamic:
                lines.append("dynamic = true")
            if ls.kind == "binary-mlp" and ls.branches != ("point", "short", "long"):
                lines.append(f"branches = {','.join(ls.branches)}")
            lines.append("")
        return "\n".join(lines)


_LAYER_KEYS = {"kind", "out", "stride", "kernel", "dynamic", "branches", "pool"}
_NETWORK_KEYS = {"name", "input", "in_channels", "classes"}


def parse_network_spec(text: str) -> NetworkSpec:
    """Parse the plain-text key-value spec format emitted by to_text()."""
    sections = []
    current = None
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = {"__section__": line[1:-1], "__line__": ln}
            sections.append(current)
            continue
        if current is None or "=" not in line:
            raise SpecError(f"line {ln}: expected 'key = value' inside a section")
        key, val = (s.strip() for s in line.split("=", 1))
        current[key] = val
    net = None
    layers = []
    for sec in sections:
        name = sec.pop("__section__")
        ln = sec.pop("__line__")
        if name == "network":
            unknown = set(sec) - _NETWORK_KEYS
            if unknown:
                raise SpecError(f"line {ln}: unknown network keys {sorted(unknown)}")
            h, w = (int(v) for v in sec["input"].lower().split("x"))
            net = NetworkSpec(name=sec.get("name", "unnamed"), input_hw=(h, w),
                              classes=int(sec["classes"]),
                              in_channels=int(sec.get("in_channels", 3)))
        elif name == "layer":
            unknown = set(sec) - _LAYER_KEYS
            if unknown:
                raise SpecError(f"line {ln}: unknown layer keys {sorted(unknown)}")
            layers.append(sec)
        else:
            raise SpecError(f"line {ln}: unknown section [{name}]")
    if net is None:
        raise SpecError("missing [network] section")
    c = net.in_channels
    for sec in layers:
        kind = sec["kind"]
        c_out = net.classes if kind == "classifier" else int(sec["out"])
        ls = LayerSpec(
            kind=kind, c_in=c, c_out=c_out,
            stride=int(sec.get("stride", 1)),
            kernel=int(sec.get("kernel", 3)),
            dynamic=sec.get("dynamic", "false").lower() == "true",
            pool=sec.get("pool", "false").lower() == "true",
        )
        if "branches" in sec:
            ls.branches = tuple(b.strip() for b in sec["branches"].split(","))
        net.layers.append(ls)
        if kind != "classifier":
            c = ls.c_out
    return net.validate()


class Network:
    """An executable stack of blocks built from a NetworkSpec."""

    def __init__(self, spec: NetworkSpec, layers, dtype):
        self.spec = spec
        self.layers = layers
        self.dtype = dtype
        self.binary_weights = True
        self.step = 0

    def params(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, p in layer.params().items():
                out[f"L{i:02d}.{name}"] = p
        return out

    def buffers(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, b in layer.buffers().items():
                out[f"L{i:02d}.{name}"] = b
        return out

    def zero_grad(self):
        for p in self.params().values():
            p.grad = None

    def clear_scale_cache(self):
        for layer in self.layers:
            if hasattr(layer, "_scale_cache"):
                layer._scale_cache = None

    def forward(self, x, training=False, surrogate=False, freeze_scales=False):
        """Float-graph forward; returns the logits Tensor."""
        if isinstance(x, np.ndarray):
            self._check_resolution(x)
            x = ag.Tensor(np.ascontiguousarray(x, dtype=self.dtype))
        st = ForwardState(training=training, binary_weights=self.binary_weights,
                          surrogate=surrogate, freeze_scales=freeze_scales)
        for layer in self.layers:
            x = layer.forward(x, st)
        return x

    def forward_packed(self, x: np.ndarray) -> np.ndarray:
        """Bit-kernel forward (evaluation statistics, binary weights)."""
        if not self.binary_weights:
            raise ValueError("packed execution requires binarized weights")
        self._check_resolution(x)
        x = np.ascontiguousarray(x, dtype=self.dtype)
        for layer in self.layers:
            x = layer.infer_packed(x)
        return x

    def _check_resolution(self, x):
        n, c, h, w = x.shape
        if (h, w) != tuple(self.spec.input_hw) or c != self.spec.in_channels:
            raise ValueError(
                f"input {c}x{h}x{w} does not match spec "
                f"{self.spec.in_channels}x{self.spec.input_hw[0]}x{self.spec.input_hw[1]}"
            )

    def state_arrays(self) -> dict:
        arrays = {f"p.{k}": p.data for k, p in self.params().items()}
        arrays.update({f"b.{k}": b for k, b in self.buffers().items()})
        return arrays

    def load_state_arrays(self, arrays: dict, allow_missing=False):
        own = self.state_arrays()
        for name, dst in own.items():
            if name not in arrays:
                if allow_missing:
                    continue
                raise CheckpointError(f"checkpoint missing tensor {name}")
            src = arrays[name]
            if src.shape != dst.shape:
                raise CheckpointError(
                    f"shape mismatch for {name}: {src.shape} vs {dst.shape}"
                )
            dst[...] = src.astype(dst.dtype)


def build(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> Network:
    """Materialize a spec into an executable network (deterministic init)."""
    spec.validate()
    rng = np.random.default_rng(seed)
    layers = []
    for ls in spec.layers:
        if ls.kind == "stem-conv":
            layers.append(StemConv(ls.c_in, ls.c_out, ls.stride, rng, dtype,
                                   kernel=ls.kernel, pool=ls.pool))
        elif ls.kind in ("binary-conv-3x3", "downsample"):
            layers.append(BinaryConvBlock(ls.c_in, ls.c_out, 3, ls.stride, rng,
                                          dtype, dynamic=ls.dynamic))
        elif ls.kind == "binary-conv-1x1":
            layers.append(BinaryConvBlock(ls.c_in, ls.c_out, 1, 1, rng, dtype,
                                          dynamic=ls.dynamic))
        elif ls.kind == "binary-mlp":
            layers.append(BinaryMlpBlock(ls.c_in, rng, dtype, branches=ls.branches))
        elif ls.kind == "classifier":
            layers.append(Classifier(ls.c_in, spec.classes, rng, dtype))
    return Network(spec, layers, dtype)


# ---------------------------------------------------------------------------
# presets


def _mobilenet_pairs():
    # (c_out of the 1x1 conv, stride of the 3x3 conv) per MobileNet-V1 pair
    return [(64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2),
            (512, 1), (512, 1), (512, 1), (512, 1), (512, 1), (1024, 2),
            (1024, 1)]


def bcdnet_a_like(classes=1000, dynamic=False, replaced=(9, 10, 12)) -> NetworkSpec:
    """MobileNet-V1-shaped binary network with the last three stride-1 3x3
    blocks swapped for three binary MLP blocks each (11 conv + 9 MLP)."""
    layers = [LayerSpec("stem-conv", 3, 32, stride=2)]
    c = 32
    mlp_started = False
    for i, (c_out, stride) in enumerate(_mobilenet_pairs()):
        if i in replaced:
            mlp_started = True
            for _ in range(3):
                layers.append(LayerSpec("binary-mlp", c, c))
        elif stride == 2:
            layers.append(LayerSpec("downsample", c, c, stride=2,
                                    dynamic=dynamic and not mlp_started))
        else:
            layers.append(LayerSpec("binary-conv-3x3", c, c,
                                    dynamic=dynamic and not mlp_started))
        layers.append(LayerSpec("binary-conv-1x1", c, c_out,
                                dynamic=dynamic and not mlp_started))
        c = c_out
    layers.append(LayerSpec("classifier", c, classes))
    name = "bcdnet-b-like" if dynamic else "bcdnet-a-like"
    return NetworkSpec(name, (224, 224), classes, layers).validate()


def bcdnet_b_like(classes=1000) -> NetworkSpec:
    """bcdnet-a-like plus dynamic contextual embeddings in the CNN stage."""
    return bcdnet_a_like(classes, dynamic=True)


def reactnet18_like(classes=1000, mlp_tail=False) -> NetworkSpec:
    """ResNet-18-shaped binary network (one conv per residual block); the
    variant replaces the three stride-1 convs of the last stage with 9
    binary MLP blocks."""
    layers = [LayerSpec("stem-conv", 3, 64, stride=2, kernel=7, pool=True)]
    stages = [(64, 4), (128, 4), (256, 4), (512, 4)]
    c = 64
    for si, (c_out, blocks) in enumerate(stages):
        for b in range(blocks):
            if si > 0 and b == 0:
                layers.append(LayerSpec("downsample", c, c_out, stride=2))
                c = c_out
            elif mlp_tail and si == len(stages) - 1:
                for _ in range(3):
                    layers.append(LayerSpec("binary-mlp", c, c))
            else:
                layers.append(LayerSpec("binary-conv-3x3", c, c))
    layers.append(LayerSpec("classifier", c, classes))
    name = "reactnet18-mlp-like" if mlp_tail else "reactnet18-like"
    return NetworkSpec(name, (224, 224), classes, layers).validate()


def desk_tiny(classes=10, branches=("point", "short", "long"),
              dynamic=False) -> NetworkSpec:
    """4 binary conv blocks + 3 binary MLP blocks at 32x32 input."""
    layers = [
        LayerSpec("stem-conv", 3, 32, stride=2),
        LayerSpec("downsample", 32, 64, stride=2, dynamic=dynamic),
        LayerSpec("binary-conv-3x3", 64, 64, dynamic=dynamic),
        LayerSpec("binary-conv-3x3", 64, 64, dynamic=dynamic),
        LayerSpec("binary-conv-3x3", 64, 64, dynamic=dynamic),
        LayerSpec("binary-mlp", 64, 64, branches=tuple(branches)),
        LayerSpec("binary-mlp", 64, 64, branches=tuple(branches)),
        LayerSpec("binary-mlp", 64, 64, branches=tuple(branches)),
        LayerSpec("classifier", 64, classes),
    ]
    return NetworkSpec("desk-tiny", (32, 32), classes, layers).validate()


def desk_micro(classes=10, branches=("point", "short", "long"),
               in_channels=1) -> NetworkSpec:
    """Small single-channel variant for fast paired-comparison runs; the
    shallow conv stage leaves half-image relations to the MLP stage."""
    layers = [
        LayerSpec("stem-conv", in_channels, 16, stride=2),
        LayerSpec("downsample", 16, 32, stride=2),
        LayerSpec("binary-mlp", 32, 32, branches=tuple(branches)),
        LayerSpec("binary-mlp", 32, 32, branches=tuple(branches)),
        LayerSpec("binary-mlp", 32, 32, branches=tuple(branches)),
        LayerSpec("classifier", 32, classes),
    ]
    return NetworkSpec("desk-micro", (16, 16), classes, layers,
                       in_channels=in_channels).validate()


def replace_trailing_convs(spec: NetworkSpec, n_mlp: int) -> NetworkSpec:
    """Swap the last n_mlp/3 stride-1 3x3 conv blocks for MLP triples.

    Downsampling blocks are never replaced; asking for more replacements
    than there are eligible conv blocks is an error.
    """
    if n_mlp % 3 != 0:
        raise SpecError("replacement converts whole conv blocks (3 MLPs each)")
    candidates = [i for i, ls in enumerate(spec.layers)
                  if ls.kind == "binary-conv-3x3" and ls.c_in % 4 == 0]
    k = n_mlp // 3
    if k > len(candidates):
        raise SpecError(
            f"cannot replace {k} conv blocks; only {len(candidates)} eligible "
            "(downsampling layers are never replaced)"
        )
    chosen = set(candidates[len(candidates) - k:])
    layers = []
    for i, ls in enumerate(spec.layers):
        if i in chosen:
            layers.extend(LayerSpec("binary-mlp", ls.c_in, ls.c_in)
                          for _ in range(3))
        else:
            layers.append(ls)
    name = f"{spec.name}-mlp{n_mlp}" if n_mlp else spec.name
    return NetworkSpec(name, spec.input_hw, spec.classes, layers,
                       spec.in_channels).validate()


def desk_sweep(classes=10, n_mlp=0) -> NetworkSpec:
    """Replacement-sweep base: 10 stride-1 conv blocks at 512x4x4; each
    sweep step converts the trailing conv into 3 MLP blocks."""
    layers = [
        LayerSpec("stem-conv", 3, 128, stride=2),
        LayerSpec("downsample", 128, 256, stride=2),
        LayerSpec("downsample", 256, 512, stride=2),
    ]
    layers += [LayerSpec("binary-conv-3x3", 512, 512) for _ in range(10)]
    layers.append(LayerSpec("classifier", 512, classes))
    base = NetworkSpec("desk-sweep", (32, 32), classes, layers).validate()
    return replace_trailing_convs(base, n_mlp)


PRESETS = {
    "bcdnet-a-like": bcdnet_a_like,
    "bcdnet-b-like": bcdnet_b_like,
    "reactnet18-like": reactnet18_like,
    "reactnet18-mlp-like": lambda classes=1000: reactnet18_like(classes, True),
    "desk-tiny": desk_tiny,
    "desk-micro": desk_micro,
    "desk-sweep": desk_sweep,
}


def preset(name: str, **kwargs) -> NetworkSpec:
    if name not in PRESETS:
        raise SpecError(f"unknown preset {name!r}; have {sorted(PRESETS)}")
    return PRESETS[name](**kwargs)


# ---------------------------------------------------------------------------
# checkpoint persistence

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def spec_hash(spec: NetworkSpec) -> bytes:
    return hashlib.sha256(spec.to_text().encode()).digest()


def save(net: Network, path) -> None:
    """Serialize parameters, buffers and metadata; see module docstring."""
    spec_text = net.spec.to_text().encode()
    meta = json.dumps({"binary_weights": net.binary_weights,
                       "step": net.step}).encode()
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", CHECKPOINT_VERSION)
    out += struct.pack("<I", len(spec_text)) + spec_text
    out += spec_hash(net.spec)
    out += struct.pack("<I", len(meta)) + meta
    arrays = net.state_arrays()
    out += struct.pack("<I", len(arrays))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        nb = name.encode()
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        payload = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        out += struct.pack("<Q", len(payload)) + payload
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    with open(path, "wb") as f:
        f.write(bytes(out))


def read_checkpoint(path):
    """Parse a checkpoint file into (spec, metadata, arrays)."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"{path}: {e.strerror or e}") from None
    if len(blob) < 16 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, crc_stored = blob[:-4], struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise CheckpointChecksumError(f"{path}: CRC mismatch (corrupt file)")
    off = 4
    (version,) = struct.unpack_from("<I", body, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, expected {CHECKPOINT_VERSION}"
        )
    (n,) = struct.unpack_from("<I", body, off)
    off += 4
    spec_text = body[off:off + n].decode()
    off += n
    digest = body[off:off + 32]
    off += 32
    if hashlib.sha256(spec_text.encode()).digest() != digest:
        raise CheckpointChecksumError(f"{path}: spec hash mismatch")
    (n,) = struct.unpack_from("<I", body, off)
    off += 4
    meta = json.loads(body[off:off + n].decode())
    off += n
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + ln].decode()
        off += ln
        code, ndim = struct.unpack_from("<BB", body, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        (nbytes,) = struct.unpack_from("<Q", body, off)
        off += 8
        arr = np.frombuffer(body, dtype=_CODE_DTYPES[code].newbyteorder("<"),
                            count=int(np.prod(shape)) if ndim else 1, offset=off)
        arrays[name] = arr.reshape(shape).astype(_CODE_DTYPES[code])
        off += nbytes
    return parse_network_spec(spec_text), meta, arrays


def load(path, dtype=np.float32, allow_missing=False) -> Network:
    """Rebuild a network from a checkpoint; forward outputs are bit-exact
    reproductions of the saved model."""
    spec, meta, arrays = read_checkpoint(path)
    net = build(spec, seed=0, dtype=dtype)
    net.load_state_arrays(arrays, allow_missing=allow_missing)
    net.binary_weights = bool(meta.get("binary_weights", True))
    net.step = int(meta.get("step", 0))
    return net


def load_into(net: Network, path, allow_missing=False) -> Network:
    """Load checkpoint tensors into an existing (possibly extended) network.

    Used when fine-tuning a dynamic-embedding variant from a plain
    checkpoint: tensors absent from the file (the zero-initialized embedding
    parameters) keep their current values when allow_missing is set.
    """
    _, meta, arrays = read_checkpoint(path)
    net.load_state_arrays(arrays, allow_missing=allow_missing)
    net.binary_weights = bool(meta.get("binary_weights", net.binary_weights))
    net.step = int(meta.get("step", net.step))
    return net
