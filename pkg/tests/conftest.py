"""Shared scalar-loop oracles and helpers.

The oracles here are deliberately naive (per-element Python loops or dense
float arithmetic) and independent of the packed kernels they check.
"""

import numpy as np
import pytest


def dense_conv_oracle(a, w, scale, stride, pad, pad_value=-1.0):
    """Loop-based dense convolution of +-1 operands with constant padding."""
    n, c, h, wd = a.shape
    co, ci, k, _ = w.shape
    ap = np.full((n, c, h + 2 * pad, wd + 2 * pad), pad_value, dtype=np.float64)
    ap[:, :, pad:pad + h, pad:pad + wd] = a
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, co, oh, ow), dtype=np.float64)
    for ni in range(n):
        for j in range(co):
            for oy in range(oh):
                for ox in range(ow):
                    patch = ap[ni, :, oy * stride:oy * stride + k,
                               ox * stride:ox * stride + k]
                    out[ni, j, oy, ox] = scale[j] * float((patch * w[j]).sum())
    return out


def reconstruct_oracle(x, offsets):
    """Position-by-position gather of channel quartiles; x is NCHW ndarray."""
    n, c, h, w = x.shape
    q = c // 4
    out = np.empty_like(x)
    for i, (r1, r2) in enumerate(offsets):
        for y in range(h):
            for xx in range(w):
                sy, sx = (y + r1) % h, (xx + r2) % w
                out[:, i * q:(i + 1) * q, y, xx] = x[:, i * q:(i + 1) * q, sy, sx]
    return out


def binarize_oracle(x, thr=0.0):
    """Elementwise sign with ties to -1."""
    return np.where(np.asarray(x) > thr, 1.0, -1.0)


def central_difference(f, x, idx, h=1e-6):
    v0 = x[idx]
    x[idx] = v0 + h
    fp = f()
    x[idx] = v0 - h
    fm = f()
    x[idx] = v0
    return (fp - fm) / (2.0 * h)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
