"""Contextual building blocks: long-short-range sampling, token
reconstruction, three-branch binary MLP blocks, binary convolution blocks
and dynamic threshold/bias embeddings.

Every block exposes two execution routes over shared parameters:

  forward(x, st)   -- autograd route on float tensors; activations are hard
                      +-1 signs (or the polynomial surrogate when
                      st.surrogate), so training and evaluation both run
                      through it.
  infer_packed(x)  -- pure-numpy route using the bit-packed XNOR/popcount
                      kernels; valid once weights are binarized.

Because the binary GEMMs produce exact integers before any float scaling,
the two routes agree bit for bit in evaluation mode; tests pin that.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .bittensor import (BitTensor, DimensionError, WORD_BITS, binary_conv2d,
                        binary_gemm, pack, pack_filters, weight_scale)

SHORT_OFFSETS = ((-1, 0), (1, 0), (0, -1), (0, 1))

BRANCH_KINDS = ("point", "short", "long")


def long_offsets(h: int, w: int):
    """Half-resolution offsets; floor division keeps odd extents wrappable."""
    return ((-(h // 2), 0), (h // 2, 0), (0, -(w // 2)), (0, w // 2))


def sample_index(pos, off, h: int, w: int):
    """Shifted token index with recurrent (modular) wraparound."""
    return ((pos[0] + off[0]) % h, (pos[1] + off[1]) % w)


def branch_offsets(kind: str, h: int, w: int):
    if kind == "point":
        return None
    if kind == "short":
        return SHORT_OFFSETS
    if kind == "long":
        return long_offsets(h, w)
    raise ValueError(f"unknown branch kind {kind!r}")


def _quartile_masks(c: int, n_words: int) -> np.ndarray:
    """Bit masks selecting each channel quartile inside the packed words."""
    idx = np.arange(n_words * WORD_BITS)
    q = c // 4
    masks = np.zeros((4, n_words), dtype=np.uint64)
    for i in range(4):
        sel = (idx >= i * q) & (idx < (i + 1) * q)
        bits = np.packbits(sel, bitorder="little")
        pad = n_words * 8 - bits.size
        if pad:
            bits = np.concatenate([bits, np.zeros(pad, dtype=np.uint8)])
        masks[i] = bits.view(np.uint64)
    return masks


def _reconstruct(a_b: BitTensor, offsets) -> BitTensor:
    if len(a_b.shape) != 4:
        raise DimensionError("token reconstruction expects a packed NCHW tensor")
    n, c, h, w = a_b.shape
    if c % 4 != 0:
        raise DimensionError(f"channels {c} not divisible by 4")
    masks = _quartile_masks(c, a_b.n_words)
    out = np.zeros_like(a_b.words)
    for i, (r1, r2) in enumerate(offsets):
        rolled = np.roll(a_b.words, (-r1, -r2), axis=(1, 2))
        out |= rolled & masks[i][None, None, None, :]
    return BitTensor(a_b.shape, out, a_b.nbits)


def reconstruct_short(a_b: BitTensor) -> BitTensor:
    """Rebuild tokens from the four one-step neighbours, one per channel
    quartile; a zero-parameter, zero-FLOP bit permutation."""
    return _reconstruct(a_b, SHORT_OFFSETS)


def reconstruct_long(a_b: BitTensor) -> BitTensor:
    """Half-resolution counterpart of reconstruct_short."""
    n, c, h, w = a_b.shape
    if h < 2 or w < 2:
        raise DimensionError(f"long-range reconstruction needs h,w >= 2, got {h}x{w}")
    return _reconstruct(a_b, long_offsets(h, w))


@dataclass
class ForwardState:
    """Execution flags threaded through block forwards."""

    training: bool = False
    binary_weights: bool = True
    surrogate: bool = False
    freeze_scales: bool = False


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class _Layer:
    """Common parameter plumbing for blocks."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}

    def _add_param(self, name, data):
        t = ag.param(data, dtype=data.dtype)
        self._params[name] = t
        return t

    def _add_buffer(self, name, data):
        self._buffers[name] = data
        return data

    def params(self):
        return self._params

    def buffers(self):
        return self._buffers


class _NormAct:
    """Mixin: batch norm + per-channel parametric activation tail."""

    def _init_norm_act(self, c, dtype):
        self.bn_gamma = self._add_param("bn_gamma", np.ones(c, dtype=dtype))
        self.bn_beta = self._add_param("bn_beta", np.zeros(c, dtype=dtype))
        self.running_mean = self._add_buffer("running_mean", np.zeros(c, dtype=dtype))
        self.running_var = self._add_buffer("running_var", np.ones(c, dtype=dtype))
        self.act_shift_in = self._add_param("act_shift_in", np.zeros(c, dtype=dtype))
        self.act_slope = self._add_param("act_slope", np.full(c, 0.25, dtype=dtype))
        self.act_shift_out = self._add_param("act_shift_out", np.zeros(c, dtype=dtype))

    def _norm(self, y: Tensor, st: ForwardState) -> Tensor:
        return ag.batchnorm(y, self.bn_gamma, self.bn_beta, self.running_mean,
                            self.running_var, training=st.training)

    def _act(self, y: Tensor) -> Tensor:
        return ag.rprelu(y, self.act_shift_in, self.act_slope, self.act_shift_out)

    def _norm_np(self, y: np.ndarray) -> np.ndarray:
        out, _, _ = ag.bn_normalize_np(y, self.running_mean, self.running_var,
                                       self.bn_gamma.data, self.bn_beta.data)
        return out

    def _act_np(self, y: np.ndarray) -> np.ndarray:
        out, _, _ = ag.rprelu_np(y, self.act_shift_in.data, self.act_slope.data,
                                 self.act_shift_out.data)
        return out


class StemConv(_Layer):
    """Full-precision entry convolution + batch norm (optional 2x pool)."""

    def __init__(self, c_in, c_out, stride, rng, dtype=np.float32, kernel=3,
                 pool=False):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.kernel, self.stride, self.pool = kernel, stride, pool
        fan_in = c_in * kernel * kernel
        self.w = self._add_param("w", _uniform(rng, (c_out, c_in, kernel, kernel),
                                               fan_in, dtype))
        self.bn_gamma = self._add_param("bn_gamma", np.ones(c_out, dtype=dtype))
        self.bn_beta = self._add_param("bn_beta", np.zeros(c_out, dtype=dtype))
        self.running_mean = self._add_buffer("running_mean",
                                             np.zeros(c_out, dtype=dtype))
        self.running_var = self._add_buffer("running_var",
                                            np.ones(c_out, dtype=dtype))

    def forward(self, x: Tensor, st: ForwardState) -> Tensor:
        y = ag.conv2d(x, self.w, stride=self.stride, pad=self.kernel // 2)
        y = ag.batchnorm(y, self.bn_gamma, self.bn_beta, self.running_mean,
                         self.running_var, training=st.training)
        if self.pool:
            y = ag.avgpool2(y)
        return y

    def infer_packed(self, x: np.ndarray) -> np.ndarray:
        cols, oh, ow = ag.im2col(x, self.kernel, self.stride, self.kernel // 2)
        y = cols @ self.w.data.reshape(self.c_out, -1).T
        y = y.reshape(x.shape[0], oh, ow, self.c_out).transpose(0, 3, 1, 2)
        y, _, _ = ag.bn_normalize_np(y, self.running_mean, self.running_var,
                                     self.bn_gamma.data, self.bn_beta.data)
        if self.pool:
            n, c, h, w = y.shape
            y = y.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
        return y

    def out_hw(self, h, w):
        oh, ow = (h + 2 * (self.kernel // 2) - self.kernel) // self.stride + 1, \
                 (w + 2 * (self.kernel // 2) - self.kernel) // self.stride + 1
        if self.pool:
            oh, ow = oh // 2, ow // 2
        return oh, ow


class DynamicEmbedding(_Layer):
    """Input-conditioned binarization thresholds and output compensation.

    From the globally pooled input: alpha = GAP(x) W1 + b_a (bottleneck
    width c/4), thresholds beta = alpha W2 + b_b, post-conv bias
    gamma = alpha W3 + b_g. W2, W3 and every bias start at zero, so a fresh
    embedding leaves the surrounding block's function untouched.
    """

    def __init__(self, c_in, c_out, rng, dtype=np.float32):
        super().__init__()
        if c_in % 4 != 0:
            raise DimensionError(f"dynamic embedding needs c_in % 4 == 0, got {c_in}")
        cb = c_in // 4
        self.w1 = self._add_param("w1", _uniform(rng, (c_in, cb), c_in, dtype))
        self.b_alpha = self._add_param("b_alpha", np.zeros(cb, dtype=dtype))
        self.w2 = self._add_param("w2", np.zeros((cb, c_in), dtype=dtype))
        self.b_beta = self._add_param("b_beta", np.zeros(c_in, dtype=dtype))
        self.w3 = self._add_param("w3", np.zeros((cb, c_out), dtype=dtype))
        self.b_gamma = self._add_param("b_gamma", np.zeros(c_out, dtype=dtype))

    def alpha(self, x: Tensor) -> Tensor:
        return ag.linear(ag.global_avg_pool(x), self.w1, self.b_alpha)

    def thresholds(self, alpha: Tensor) -> Tensor:
        return ag.linear(alpha, self.w2, self.b_beta)

    def gamma(self, alpha: Tensor) -> Tensor:
        return ag.linear(alpha, self.w3, self.b_gamma)

    def alpha_np(self, x: np.ndarray) -> np.ndarray:
        return x.mean(axis=(2, 3)) @ self.w1.data + self.b_alpha.data

    def thresholds_np(self, alpha: np.ndarray) -> np.ndarray:
        return alpha @ self.w2.data + self.b_beta.data

    def gamma_np(self, alpha: np.ndarray) -> np.ndarray:
        return alpha @ self.w3.data + self.b_gamma.data


def _shortcut(x: Tensor, c_in, c_out, stride) -> Tensor:
    if stride == 2:
        x = ag.avgpool2(x)
    if c_out != c_in:
        if c_out % c_in != 0:
            raise DimensionError(
                f"skip path cannot map {c_in} -> {c_out} channels"
            )
        x = ag.channel_tile(x, c_out // c_in)
    return x


def _shortcut_np(x: np.ndarray, c_in, c_out, stride) -> np.ndarray:
    if stride == 2:
        n, c, h, w = x.shape
        x = x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    if c_out != c_in:
        x = np.concatenate([x] * (c_out // c_in), axis=1)
    return x


class BinaryConvBlock(_Layer, _NormAct):
    """Sign-binarize, binary conv, optional dynamic bias, norm, skip, act.

    Thresholds are a learnable per-channel vector, or per-sample dynamic
    embeddings when ``dynamic``. Real-weight mode (two-step training, step
    one) runs the same wiring with full-precision filters and no scale.
    """

    def __init__(self, c_in, c_out, kernel, stride, rng, dtype=np.float32,
                 dynamic=False, scale_granularity="filter"):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.kernel, self.stride = kernel, stride
        self.scale_granularity = scale_granularity
        fan_in = c_in * kernel * kernel
        self.w = self._add_param("w", _uniform(rng, (c_out, c_in, kernel, kernel),
                                               fan_in, dtype))
        self.dynamic = None
        if dynamic:
            self.dynamic = DynamicEmbedding(c_in, c_out, rng, dtype)
            for name, p in self.dynamic.params().items():
                self._params[f"dyn.{name}"] = p
        else:
            self.thr = self._add_param("thr", np.zeros(c_in, dtype=dtype))
        self._init_norm_act(c_out, dtype)
        self._scale_cache = None

    def scale(self, st: ForwardState):
        if not st.binary_weights:
            return None
        if st.freeze_scales:
            if self._scale_cache is None:
                self._scale_cache = weight_scale(self.w.data, self.scale_granularity)
            return self._scale_cache
        self._scale_cache = None
        return weight_scale(self.w.data, self.scale_granularity)

    def forward(self, x: Tensor, st: ForwardState) -> Tensor:
        if self.dynamic is not None:
            alpha = self.dynamic.alpha(x)
            thr = self.dynamic.thresholds(alpha)
            gamma = self.dynamic.gamma(alpha)
        else:
            thr, gamma = self.thr, None
        xb = ag.binarize(x, thr, surrogate=st.surrogate)
        y = ag.conv2d(xb, self.w, stride=self.stride, pad=self.kernel // 2,
                      binary_weights=st.binary_weights, surrogate=st.surrogate,
                      frozen_scale=self.scale(st), pad_value=-1.0)
        if gamma is not None:
            y = y + gamma.reshape(gamma.shape[0], self.c_out, 1, 1)
        y = self._norm(y, st)
        y = y + _shortcut(x, self.c_in, self.c_out, self.stride)
        return self._act(y)

    def infer_packed(self, x: np.ndarray) -> np.ndarray:
        if self.dynamic is not None:
            alpha = self.dynamic.alpha_np(x)
            thr = self.dynamic.thresholds_np(alpha)
            gamma = self.dynamic.gamma_np(alpha)
        else:
            thr, gamma = self.thr.data, None
        bits = pack(x, thr)
        scale = weight_scale(self.w.data, self.scale_granularity)
        y = binary_conv2d(bits, pack_filters(self.w.data), scale,
                          stride=self.stride, pad=self.kernel // 2)
        if gamma is not None:
            y = y + gamma[:, :, None, None]
        y = self._norm_np(y)
        y = y + _shortcut_np(x, self.c_in, self.c_out, self.stride)
        return self._act_np(y)

    def out_hw(self, h, w):
        p, k, s = self.kernel // 2, self.kernel, self.stride
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


class BinaryMlpBlock(_Layer, _NormAct):
    """Three token-wise binary MLP branches over reconstructed tokens.

    Each branch models one sampling range (pointwise / short / long); branch
    outputs are summed, then norm, identity skip and activation follow. The
    branch assignment is configurable so pointwise-only or long-only
    ablations reuse the same block.
    """

    def __init__(self, c, rng, dtype=np.float32,
                 branches=("point", "short", "long"), share_threshold=True,
                 scale_granularity="filter"):
        super().__init__()
        if c % 4 != 0:
            raise DimensionError(f"MLP block needs channels % 4 == 0, got {c}")
        for b in branches:
            if b not in BRANCH_KINDS:
                raise ValueError(f"unknown branch kind {b!r}")
        self.c = c
        self.branches = tuple(branches)
        self.share_threshold = share_threshold
        self.scale_granularity = scale_granularity
        self.ws = []
        for i in range(3):
            w = self._add_param(f"w{i}", _uniform(rng, (c, c), c, dtype))
            self.ws.append(w)
        if share_threshold:
            self.thrs = [self._add_param("thr", np.zeros(c, dtype=dtype))] * 3
        else:
            self.thrs = [self._add_param(f"thr{i}", np.zeros(c, dtype=dtype))
                         for i in range(3)]
        self._init_norm_act(c, dtype)
        self._scale_cache = None

    def scales(self, st: ForwardState):
        if not st.binary_weights:
            return [None] * 3
        if st.freeze_scales:
            if self._scale_cache is None:
                self._scale_cache = [weight_scale(w.data, self.scale_granularity)
                                     for w in self.ws]
            return self._scale_cache
        self._scale_cache = None
        return [weight_scale(w.data, self.scale_granularity) for w in self.ws]

    def forward(self, x: Tensor, st: ForwardState) -> Tensor:
        h, w = x.data.shape[2], x.data.shape[3]
        scales = self.scales(st)
        xb_shared = ag.binarize(x, self.thrs[0], surrogate=st.surrogate) \
            if self.share_threshold else None
        y = None
        for i, kind in enumerate(self.branches):
            xb = xb_shared if self.share_threshold else \
                ag.binarize(x, self.thrs[i], surrogate=st.surrogate)
            offs = branch_offsets(kind, h, w)
            tok = xb if offs is None else ag.quartile_shift(xb, offs)
            out = ag.token_fc(tok, self.ws[i], binary_weights=st.binary_weights,
                              surrogate=st.surrogate, frozen_scale=scales[i])
            y = out if y is None else y + out
        y = self._norm(y, st)
        y = y + x
        return self._act(y)

    def infer_packed(self, x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        scales = [weight_scale(wt.data, self.scale_granularity) for wt in self.ws]
        bits_shared = pack(x, self.thrs[0].data) if self.share_threshold else None
        y = None
        for i, kind in enumerate(self.branches):
            bits = bits_shared if self.share_threshold else pack(x, self.thrs[i].data)
            if kind == "short":
                bits = reconstruct_short(bits)
            elif kind == "long":
                bits = reconstruct_long(bits)
            rows = BitTensor((n * h * w, c), bits.words.reshape(n * h * w, -1),
                             bits.nbits)
            wq = pack_filters(self.ws[i].data)
            out = binary_gemm(rows, wq, scales[i])
            out = out.reshape(n, h, w, c).transpose(0, 3, 1, 2)
            y = out if y is None else y + out
        y = self._norm_np(y)
        y = y + x
        return self._act_np(y)

    def out_hw(self, h, w):
        return h, w


class Classifier(_Layer):
    """Global average pool + full-precision linear head."""

    def __init__(self, c_in, classes, rng, dtype=np.float32):
        super().__init__()
        self.c_in, self.classes = c_in, classes
        self.w = self._add_param("w", _uniform(rng, (c_in, classes), c_in, dtype))
        self.b = self._add_param("b", np.zeros(classes, dtype=dtype))

    def forward(self, x: Tensor, st: ForwardState) -> Tensor:
        return ag.linear(ag.global_avg_pool(x), self.w, self.b)

    def infer_packed(self, x: np.ndarray) -> np.ndarray:
        return x.mean(axis=(2, 3)) @ self.w.data + self.b.data
