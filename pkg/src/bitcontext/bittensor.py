"""Bit-packed binary tensors and the XNOR/popcount compute kernels.

Sign encoding: bit=1 means +1, bit=0 means -1. Binarization follows the
convention value <= threshold -> -1 (so exact zeros under a zero threshold
binarize to -1). Bits are packed 64 per machine word along a single axis,
LSB-first within each word: logical index i lives in word i // 64 at bit
position i % 64. Padding bits past the logical extent are kept at zero and
kernels mask the final word, so results never depend on padding content.

Layouts:
  2-D (rows, cols)   -> words shape (rows, W), packed along cols
  4-D (n, c, h, w)   -> words shape (n, h, w, W), packed along channels
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WORD_BITS = 64


class DimensionError(ValueError):
    """Shape or length mismatch between binary operands."""


def _popcount(words: np.ndarray) -> np.ndarray:
    return np.bitwise_count(words)


def _pack_last_axis(bits: np.ndarray) -> np.ndarray:
    """Pack a (..., n) array of 0/1 values into (..., ceil(n/64)) uint64."""
    packed_bytes = np.packbits(bits.astype(np.uint8), axis=-1, bitorder="little")
    n_bytes = packed_bytes.shape[-1]
    word_bytes = 8 * ((n_bytes + 7) // 8)
    if word_bytes != n_bytes:
        pad = np.zeros(bits.shape[:-1] + (word_bytes - n_bytes,), dtype=np.uint8)
        packed_bytes = np.concatenate([packed_bytes, pad], axis=-1)
    return np.ascontiguousarray(packed_bytes).view(np.uint64)


def _unpack_last_axis(words: np.ndarray, nbits: int) -> np.ndarray:
    """Inverse of _pack_last_axis; returns uint8 bits of shape (..., nbits)."""
    as_bytes = np.ascontiguousarray(words).view(np.uint8)
    bits = np.unpackbits(as_bytes, axis=-1, bitorder="little", count=nbits)
    return bits


def _tail_mask(nbits: int) -> np.uint64:
    rem = nbits % WORD_BITS
    if rem == 0:
        return np.uint64(0xFFFFFFFFFFFFFFFF)
    return np.uint64((1 << rem) - 1)


@dataclass
class BitTensor:
    """Sign-packed binary tensor.

    shape is the logical extent; words holds the packed bits (see module
    docstring for the axis mapping); nbits is the number of valid bits along
    the packed axis.
    """

    shape: tuple
    words: np.ndarray
    nbits: int

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)

    @property
    def n_words(self) -> int:
        return self.words.shape[-1]

    def unpack(self) -> np.ndarray:
        return unpack(self)

    def padding_is_clean(self) -> bool:
        """True when every bit past nbits is zero (constructor guarantee)."""
        mask = _tail_mask(self.nbits)
        if mask == np.uint64(0xFFFFFFFFFFFFFFFF):
            return True
        tail = self.words[..., -1]
        return bool(np.all(tail & ~mask == 0))

    def copy(self) -> "BitTensor":
        return BitTensor(self.shape, self.words.copy(), self.nbits)


def pack(x: np.ndarray, threshold=0.0) -> BitTensor:
    """Binarize a real tensor against per-channel thresholds and pack it.

    x may be 1-D, 2-D (rows, cols) or 4-D NCHW. The threshold is a scalar, a
    per-channel vector, or (for NCHW) a per-sample (n, c) matrix. A value
    strictly above its threshold packs as bit 1 (+1); everything else,
    including exact ties, packs as bit 0 (-1).
    """
    x = np.asarray(x)
    threshold = np.asarray(threshold, dtype=x.dtype if x.dtype.kind == "f" else np.float64)
    if x.ndim == 4:
        n, c, h, w = x.shape
        if threshold.ndim == 0:
            thr = threshold
        elif threshold.shape == (c,):
            thr = threshold.reshape(1, c, 1, 1)
        elif threshold.shape == (n, c):
            thr = threshold.reshape(n, c, 1, 1)
        else:
            raise DimensionError(
                f"threshold shape {threshold.shape} incompatible with channels {c}"
            )
        bits = (x > thr).transpose(0, 2, 3, 1)  # channel-last
        return BitTensor((n, c, h, w), _pack_last_axis(bits), c)
    if x.ndim in (1, 2):
        k = x.shape[-1]
        if threshold.ndim == 0:
            thr = threshold
        elif threshold.shape == (k,):
            thr = threshold
        else:
            raise DimensionError(
                f"threshold shape {threshold.shape} incompatible with row length {k}"
            )
        bits = x > thr
        return BitTensor(x.shape, _pack_last_axis(bits), k)
    raise DimensionError(f"unsupported rank {x.ndim} for pack")


def unpack(b: BitTensor) -> np.ndarray:
    """Expand packed signs back to a float32 tensor of -1/+1 values."""
    bits = _unpack_last_axis(b.words, b.nbits)
    out = bits.astype(np.float32) * 2.0 - 1.0
    if len(b.shape) == 4:
        return out.transpose(0, 3, 1, 2)  # back to NCHW
    return out.reshape(b.shape)


def pack_bits(bits: np.ndarray) -> BitTensor:
    """Pack an explicit 0/1 array along its last axis (no thresholding)."""
    return BitTensor(bits.shape, _pack_last_axis(bits), bits.shape[-1])


def xnor_dot(a: BitTensor, w: BitTensor) -> int:
    """Integer dot product of two packed sign vectors.

    Equals 2 * popcount(XNOR(a, w)) - n over the n valid bits, which is the
    exact dot product of the corresponding +-1 vectors.
    """
    if a.nbits != w.nbits:
        raise DimensionError(f"valid-bit counts differ: {a.nbits} vs {w.nbits}")
    aw = a.words.reshape(-1)
    ww = w.words.reshape(-1)
    if aw.shape != ww.shape:
        raise DimensionError("word counts differ")
    x = aw ^ ww
    x[-1] &= _tail_mask(a.nbits)  # mask: result independent of padding bits
    mismatches = int(_popcount(x).sum())
    return a.nbits - 2 * mismatches


def _xor_popcount_gemm(a_words: np.ndarray, w_words: np.ndarray, nbits: int,
                       block_rows: int = 2048) -> np.ndarray:
    """Mismatch counts between every row pair: (R, W) x (C, W) -> (R, C) int32."""
    r = a_words.shape[0]
    c = w_words.shape[0]
    mask = _tail_mask(nbits)
    a_words = a_words.copy()
    w_words = w_words.copy()
    a_words[:, -1] &= mask
    w_words[:, -1] &= mask
    out = np.empty((r, c), dtype=np.int32)
    wt = w_words[None, :, :]
    for lo in range(0, r, block_rows):
        hi = min(lo + block_rows, r)
        x = a_words[lo:hi, None, :] ^ wt
        out[lo:hi] = _popcount(x).sum(axis=-1, dtype=np.int64).astype(np.int32)
    return out


def binary_gemm(a: BitTensor, w: BitTensor, scale: np.ndarray) -> np.ndarray:
    """Scaled binary matrix product: out[i, j] = scale[j] * <a_i, w_j>.

    a has logical shape (rows, k); w holds the output filters as rows,
    logical shape (cols, k). The inner product runs over the k packed sign
    bits via XOR + popcount; the float scale is applied after the exact
    integer dot, so results match a dense float multiply of the unpacked
    operands bit for bit.
    """
    if len(a.shape) != 2 or len(w.shape) != 2:
        raise DimensionError("binary_gemm expects 2-D operands")
    if a.nbits != w.nbits:
        raise DimensionError(f"inner dimensions differ: {a.nbits} vs {w.nbits}")
    scale = np.asarray(scale)
    if scale.dtype.kind != "f":
        scale = scale.astype(np.float32)
    if scale.shape != (w.shape[0],):
        raise DimensionError(
            f"scale length {scale.shape} != output columns {w.shape[0]}"
        )
    mismatches = _xor_popcount_gemm(
        a.words.reshape(a.shape[0], -1), w.words.reshape(w.shape[0], -1), a.nbits
    )
    dots = (a.nbits - 2 * mismatches).astype(scale.dtype)
    return dots * scale[None, :]


def _im2col_bits(bits_nchw: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """Gather conv patches from a 0/1 NCHW array into rows of length c*k*k.

    Spatial padding inserts zeros, i.e. -1 in the sign domain.
    """
    n, c, h, w = bits_nchw.shape
    if pad:
        bits_nchw = np.pad(
            bits_nchw, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=0
        )
    hp, wp = bits_nchw.shape[2], bits_nchw.shape[3]
    if hp < k or wp < k:
        raise DimensionError(f"kernel {k} exceeds padded input {hp}x{wp}")
    win = np.lib.stride_tricks.sliding_window_view(bits_nchw, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (n, c, oh, ow, k, k)
    oh, ow = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * k * k)
    return np.ascontiguousarray(cols), oh, ow


def binary_conv2d(a: BitTensor, w: BitTensor, scale: np.ndarray,
                  stride: int = 1, pad: int = 0) -> np.ndarray:
    """Binary 2-D convolution via im2col + binary_gemm.

    a is a packed NCHW activation; w holds c_out filters as packed rows of
    length c_in*k*k (channel-major, then kernel row, then kernel column).
    Padding pixels enter as -1. Returns float32 (n, c_out, oh, ow).
    """
    if len(a.shape) != 4:
        raise DimensionError("binary_conv2d expects a packed NCHW activation")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    n, c, h, w_in = a.shape
    c_out = w.shape[0]
    fan_in = w.nbits
    k2 = fan_in // c
    k = int(round(k2 ** 0.5))
    if c * k * k != fan_in:
        raise DimensionError(
            f"filter fan-in {fan_in} is not c_in*k*k for c_in={c}"
        )
    bits = _unpack_last_axis(a.words, a.nbits).transpose(0, 3, 1, 2)  # (n,c,h,w)
    cols, oh, ow = _im2col_bits(bits, k, stride, pad)
    a_rows = pack_bits(cols)
    out = binary_gemm(a_rows, w, scale)  # (n*oh*ow, c_out)
    return out.reshape(n, oh, ow, c_out).transpose(0, 3, 1, 2)


def weight_scale(w: np.ndarray, granularity: str = "filter") -> np.ndarray:
    """Per-filter scale factors: L1 norm over the fan-in divided by fan-in.

    "filter" gives one scale per output channel (axis 0); "layer" collapses
    to a single shared scalar, broadcast back to per-filter length.
    """
    w = np.asarray(w)
    if w.size == 0:
        raise ValueError("empty filter bank")
    dtype = w.dtype if w.dtype.kind == "f" else np.float32
    c_out = w.shape[0]
    flat = np.abs(w.reshape(c_out, -1))
    if granularity == "filter":
        return flat.mean(axis=1).astype(dtype)
    if granularity == "layer":
        return np.full(c_out, flat.mean(), dtype=dtype)
    raise ValueError(f"unknown scale granularity: {granularity!r}")


def pack_filters(w: np.ndarray, threshold=0.0) -> BitTensor:
    """Pack a (c_out, c_in, k, k) or (c_out, fan_in) filter bank row-wise."""
    w = np.asarray(w)
    return pack(w.reshape(w.shape[0], -1), threshold)
