"""Binarization-error measurement over shadow weights.

The error of a filter bank is the mean absolute residual between the real
weights and their scaled sign approximation:

    error = (1/n) * sum |alpha * sign(w) - w|

Two scale modes ship. "xnor" uses the per-filter L1 norm over the fan-in
divided by the fan-in (the scale the binary kernels actually apply), so the
error is exactly the representation error of the deployed layer and is zero
iff every filter is a scalar multiple of its sign pattern. "literal" uses
||sign(w)||_1 / c_in instead, which collapses to fan_in/c_in (a constant, 1
for token-wise MLP weights); it ships for comparison since only the xnor
form can describe the deployed kernels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blocks import BinaryMlpBlock
from .network import Network


@dataclass
class BinErrRow:
    layer: int
    branch: str
    error: float


@dataclass
class BinErrReport:
    rows: list = field(default_factory=list)

    def to_delimited(self, sep="\t") -> str:
        lines = [sep.join(["layer", "branch", "error"])]
        for r in self.rows:
            lines.append(sep.join([str(r.layer), r.branch, f"{r.error:.8e}"]))
        return "\n".join(lines)


def binarization_error(w: np.ndarray, mode: str = "xnor") -> float:
    """Mean |alpha*sign(w) - w| with alpha per the selected mode."""
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise ValueError("empty weight tensor")
    if w.ndim == 1:
        w = w[None, :]
    c_out = w.shape[0]
    c_in = w.shape[1]
    flat = w.reshape(c_out, -1)
    sign = np.where(flat > 0, 1.0, -1.0)
    if mode == "xnor":
        alpha = np.abs(flat).mean(axis=1, keepdims=True)
    elif mode == "literal":
        # per-filter L1 of the sign pattern over the channel count,
        # i.e. fan_in / c_in (k*k for convs, exactly 1 for MLPs)
        alpha = np.abs(sign).sum(axis=1, keepdims=True) / c_in
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return float(np.abs(alpha * sign - flat).mean())


_BRANCH_NAMES = {"point": "P", "short": "S", "long": "L"}


def per_branch_report(net: Network, mode: str = "xnor") -> BinErrReport:
    """One error row per (MLP block, branch), ordered by depth."""
    report = BinErrReport()
    for i, layer in enumerate(net.layers):
        if not isinstance(layer, BinaryMlpBlock):
            continue
        for kind, w in zip(layer.branches, layer.ws):
            report.rows.append(BinErrRow(
                layer=i, branch=_BRANCH_NAMES[kind],
                error=binarization_error(w.data, mode)))
    if not report.rows:
        raise ValueError("network contains no MLP blocks")
    return report
