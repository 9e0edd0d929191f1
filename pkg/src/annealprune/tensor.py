"""Dense array primitives used by the network engine.

Arrays are plain ``numpy.ndarray`` values (float32 unless a caller asks for
something wider).  Every function here returns a fresh array and leaves its
inputs untouched.
"""

from __future__ import annotations

import zlib
from typing import Hashable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32


class DimensionError(ValueError):
    """Raised when array shapes do not compose."""


class NumericError(FloatingPointError):
    """Raised when an operation produced NaN or Inf."""


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values produced by {where}")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return check_finite(a @ b, "matmul")


def _pad_amount(padding: str) -> int:
    if padding == "same":
        return 1
    if padding == "valid":
        return 0
    raise ValueError(f"unknown padding {padding!r}; expected 'same' or 'valid'")


def im2col(x: np.ndarray, padding: str) -> np.ndarray:
    """Unfold 3x3 patches of a (B, H, W, C) batch into rows.

    Returns an array of shape (B, H', W', 9*C) where the last axis is ordered
    (dy, dx, channel), matching a filter bank stored as (F, 3, 3, C).
    """
    pad = _pad_amount(padding)
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    if x.shape[1] < 3 or x.shape[2] < 3:
        raise DimensionError(f"input {x.shape[1:]} too small for a 3x3 valid convolution")
    win = sliding_window_view(x, (3, 3), axis=(1, 2))  # B, H', W', C, 3, 3
    win = win.transpose(0, 1, 2, 4, 5, 3)
    b, h, w = win.shape[:3]
    return np.ascontiguousarray(win).reshape(b, h, w, -1)


def col2im(cols: np.ndarray, input_shape: tuple, padding: str) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch rows back onto the input."""
    pad = _pad_amount(padding)
    b, h, w, c = input_shape
    out = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
    ho, wo = cols.shape[1:3]
    cols = cols.reshape(b, ho, wo, 3, 3, c)
    for dy in range(3):
        for dx in range(3):
            out[:, dy:dy + ho, dx:dx + wo, :] += cols[:, :, :, dy, dx, :]
    if pad:
        out = out[:, pad:-pad, pad:-pad, :]
    return out


def conv2d_forward(x: np.ndarray, filters: np.ndarray, bias: np.ndarray,
                   padding: str = "same") -> np.ndarray:
    """3x3 stride-1 cross-correlation plus bias.

    ``x`` is (H, W, C) or a batch (B, H, W, C); ``filters`` is (F, 3, 3, C).
    """
    x = np.asarray(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects HWC or BHWC input, got shape {x.shape}")
    if filters.ndim != 4 or filters.shape[1:3] != (3, 3):
        raise DimensionError(f"filters must be (F, 3, 3, C), got {filters.shape}")
    if filters.shape[3] != x.shape[3]:
        raise DimensionError(
            f"channel mismatch: input has {x.shape[3]}, filters expect {filters.shape[3]}")
    if bias.shape != (filters.shape[0],):
        raise DimensionError(f"bias shape {bias.shape} does not match {filters.shape[0]} filters")
    cols = im2col(x, padding)
    out = cols @ filters.reshape(filters.shape[0], -1).T + bias
    check_finite(out, "conv2d")
    return out[0] if single else out


def maxpool2x2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 max pooling with floor semantics for odd sizes.

    Returns ``(pooled, argmax)`` where ``argmax`` holds, for every output cell,
    the position 0..3 of the winner inside its window (row-major, first
    maximum wins).
    """
    x = np.asarray(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise DimensionError(f"maxpool expects HWC or BHWC input, got shape {x.shape}")
    b, h, w, c = x.shape
    if h < 2 or w < 2:
        raise DimensionError(f"maxpool2x2 needs h, w >= 2, got {h}x{w}")
    ho, wo = h // 2, w // 2
    win = x[:, :2 * ho, :2 * wo, :].reshape(b, ho, 2, wo, 2, c)
    win = win.transpose(0, 1, 3, 5, 2, 4).reshape(b, ho, wo, c, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    if single:
        return out[0], idx[0]
    return out, idx


def maxpool2x2_backward(grad_out: np.ndarray, argmax: np.ndarray,
                        input_shape: tuple) -> np.ndarray:
    b, h, w, c = input_shape
    ho, wo = h // 2, w // 2
    onehot = (argmax[..., None] == np.arange(4)).astype(grad_out.dtype)
    win = onehot * grad_out[..., None]  # b, ho, wo, c, 4
    win = win.reshape(b, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    grad_in = np.zeros(input_shape, dtype=grad_out.dtype)
    grad_in[:, :2 * ho, :2 * wo, :] = win.reshape(b, 2 * ho, 2 * wo, c)
    return grad_in


def _key_part(child: Hashable) -> tuple[int, int]:
    # Tag the two namespaces so an integer child can never alias a string one.
    if isinstance(child, (int, np.integer)):
        if child < 0:
            raise ValueError("integer child ids must be non-negative")
        return (1, int(child))
    return (0, zlib.crc32(str(child).encode("utf-8")))


class Rng:
    """Seeded PCG64 stream with named, order-independent substreams.

    ``derive(child)`` depends only on the root seed and the derivation path,
    never on how many values the parent has produced.
    """

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self.generator = np.random.Generator(np.random.PCG64(seq))

    def derive(self, child: Hashable) -> "Rng":
        return Rng(self.seed, self.key + _key_part(child))

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return rng_uniform(self, lo, hi)

    def get_state(self) -> dict:
        return {"seed": self.seed, "key": list(self.key),
                "bit_generator": self.generator.bit_generator.state}

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(state["seed"], tuple(state["key"]))
        rng.generator.bit_generator.state = state["bit_generator"]
        return rng

    def __repr__(self):
        return f"Rng(seed={self.seed}, key={self.key})"


def rng_uniform(rng: Rng, lo: float, hi: float) -> float:
    """One draw from U[lo, hi)."""
    if lo > hi:
        raise ValueError(f"empty interval: lo={lo} > hi={hi}")
    if lo == hi:
        return float(lo)
    value = lo + (hi - lo) * rng.generator.random()
    # rounding can land exactly on hi
    return float(min(value, np.nextafter(hi, lo)))
