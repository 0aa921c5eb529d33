"""Dense numeric kernel shared by every other module.

Tensors are plain float64 numpy arrays. This module adds the few operations
that need stricter contracts than numpy gives out of the box: shape-checked
matrix products, an exactly odd error function, stride-1 2-D convolution and
a counter-based random stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

FLOAT = np.float64

_SQRT2 = math.sqrt(2.0)


class DimensionError(ValueError):
    """Raised when tensor extents are incompatible."""


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=FLOAT)


def matmul(a, b) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def erf(x):
    """Error function, exactly odd: erf(-x) == -erf(x) bit for bit.

    Accepts a scalar or an array; scalars come back as Python floats.
    """
    if np.ndim(x) == 0:
        x = float(x)
        return math.copysign(math.erf(abs(x)), x)
    x = as_tensor(x)
    return np.copysign(special.erf(np.abs(x)), x)


def norm_cdf(x):
    return 0.5 * (1.0 + erf(np.divide(x, _SQRT2)))


def norm_pdf(x):
    return np.exp(-0.5 * np.square(x)) / math.sqrt(2.0 * math.pi)


def _pad_amounts(k: int, padding: str) -> tuple[int, int]:
    if padding == "valid":
        return 0, 0
    if padding == "same":
        total = k - 1
        return total // 2, total - total // 2
    raise ValueError(f"unknown padding {padding!r}")


def conv_output_shape(input_shape, kernel_shape, padding: str) -> tuple[int, int, int]:
    """Output extents of a stride-1 convolution of an H x W x C input."""
    if len(input_shape) != 3:
        raise DimensionError(f"conv2d input must be H x W x C, got {tuple(input_shape)}")
    if len(kernel_shape) != 4:
        raise DimensionError(f"conv2d kernel must be kh x kw x C x C_out, got {tuple(kernel_shape)}")
    h, w, c = input_shape
    kh, kw, kc, c_out = kernel_shape
    if kc != c:
        raise DimensionError(
            f"kernel {tuple(kernel_shape)} expects {kc} channels, input {tuple(input_shape)} has {c}"
        )
    top, bottom = _pad_amounts(kh, padding)
    left, right = _pad_amounts(kw, padding)
    hp, wp = h + top + bottom, w + left + right
    if kh > hp or kw > wp:
        raise DimensionError(
            f"kernel {tuple(kernel_shape)} larger than padded input {(hp, wp, c)}"
        )
    return hp - kh + 1, wp - kw + 1, c_out


def conv2d(x, kernel, padding: str = "valid") -> np.ndarray:
    """Stride-1 cross-correlation of ``x`` (..., H, W, C) with ``kernel`` (kh, kw, C, C_out).

    Leading batch axes are carried through. ``same`` pads with zeros, putting
    the odd extra row/column at the bottom/right.
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    if x.ndim < 3:
        raise DimensionError(f"conv2d input must be H x W x C, got {x.shape}")
    conv_output_shape(x.shape[-3:], kernel.shape, padding)
    kh, kw = kernel.shape[:2]
    top, bottom = _pad_amounts(kh, padding)
    left, right = _pad_amounts(kw, padding)
    if top or bottom or left or right:
        pad = [(0, 0)] * (x.ndim - 3) + [(top, bottom), (left, right), (0, 0)]
        x = np.pad(x, pad)
    # windows: (..., Ho, Wo, C, kh, kw)
    windows = sliding_window_view(x, (kh, kw), axis=(-3, -2))
    return np.einsum("...ijcab,abcd->...ijd", windows, kernel)


@dataclass(frozen=True)
class RngStream:
    """Identifies an independent random stream by ``(seed, stream_id)``.

    Backed by the counter-based Philox generator, so a stream's draws depend
    only on its identity and never on which worker consumes it.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        if not (0 <= self.seed < 2**64 and 0 <= self.stream_id < 2**64):
            raise ValueError("seed and stream_id must be 64-bit unsigned integers")

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.Philox(seq))

    def child(self, stream_id: int) -> RngStream:
        return RngStream(self.seed, stream_id)


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministically derive a new 64-bit seed from ``seed`` and integer keys."""
    seq = np.random.SeedSequence([seed, *keys])
    return int(seq.generate_state(1, np.uint64)[0])
