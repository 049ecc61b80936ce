"""1D primitives: centred convolution, decimation, zero-insertion upsampling,
Gaussian slice-profile kernels.

Every function works on the last axis of an ndarray so the same code path
serves single lines, batches of lines and whole images. Arithmetic is float64.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


class BoundaryMode(enum.Enum):
    ZERO_PAD = "zero"
    REFLECT = "reflect"


@dataclass(frozen=True)
class Kernel:
    """Filter taps plus the index that sits on the output sample.

    ``convolve1d`` computes ``out[n] = sum_k taps[k] * x[n - k + center]``.
    """

    taps: np.ndarray
    center: int

    def __post_init__(self):
        taps = np.array(self.taps, dtype=np.float64).reshape(-1)
        if taps.size == 0:
            raise InvalidArgument("kernel must have at least one tap")
        if not np.all(np.isfinite(taps)):
            raise InvalidArgument("kernel taps must be finite")
        if not 0 <= self.center < taps.size:
            raise InvalidArgument(f"center {self.center} outside [0, {taps.size})")
        taps.setflags(write=False)
        object.__setattr__(self, "taps", taps)
        object.__setattr__(self, "center", int(self.center))

    def __len__(self):
        return self.taps.size

    def reversed(self) -> "Kernel":
        """Adjoint kernel: convolving with it is the transpose of convolving with self."""
        return Kernel(self.taps[::-1].copy(), len(self) - 1 - self.center)

    def padded(self, length: int) -> "Kernel":
        """Zero-pad symmetrically to ``length`` taps (extra tap goes on the right)."""
        extra = length - len(self)
        if extra < 0:
            raise InvalidArgument(f"cannot pad {len(self)} taps down to {length}")
        left = extra // 2
        taps = np.concatenate([np.zeros(left), self.taps, np.zeros(extra - left)])
        return Kernel(taps, self.center + left)


def _pad_last(x, left, right, mode):
    if left == 0 and right == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 1) + [(left, right)]
    if mode is BoundaryMode.ZERO_PAD:
        return np.pad(x, widths)
    # half-sample symmetric; keeps constants fixed and works for length-1 input
    return np.pad(x, widths, mode="symmetric")


def convolve1d(x, h: Kernel, mode: BoundaryMode = BoundaryMode.ZERO_PAD) -> np.ndarray:
    """Same-length centred convolution along the last axis."""
    if not isinstance(h, Kernel):
        h = Kernel(h, 0)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 1:
        raise InvalidArgument("signal must have at least one sample")
    n = x.shape[-1]
    L = len(h)
    xp = _pad_last(x, L - 1 - h.center, h.center, mode)
    out = np.zeros(x.shape, dtype=np.float64)
    for k in range(L):
        start = L - 1 - k
        out += h.taps[k] * xp[..., start:start + n]
    return out


def correlate_taps(g, x, L: int, center: int) -> np.ndarray:
    """Gradient of ``sum(g * convolve1d(x, h))`` with respect to the taps of h.

    ``g`` and ``x`` share a shape; all leading axes are summed over.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    xp = _pad_last(x, L - 1 - center, center, BoundaryMode.ZERO_PAD)
    g2 = np.reshape(g, (-1, n))
    x2 = np.reshape(xp, (-1, n + L - 1))
    windows = np.lib.stride_tricks.sliding_window_view(x2, n, axis=-1)  # (B, L, n)
    # windows[:, j] = xp[j:j+n]; tap k pairs with window L-1-k
    per_window = np.einsum("bn,bjn->j", g2, windows)
    return per_window[::-1].copy()


def decimate(x, M: int, phase: int = 0) -> np.ndarray:
    """Keep every M-th sample starting at ``phase``."""
    if M < 1:
        raise InvalidArgument(f"decimation factor must be >= 1, got {M}")
    if not 0 <= phase < M:
        raise InvalidArgument(f"phase {phase} outside [0, {M})")
    return np.asarray(x, dtype=np.float64)[..., phase::M].copy()


def upsample_zero(x, M: int) -> np.ndarray:
    """Insert M-1 zeros after every sample."""
    if M < 1:
        raise InvalidArgument(f"upsampling factor must be >= 1, got {M}")
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros(x.shape[:-1] + (x.shape[-1] * M,), dtype=np.float64)
    out[..., ::M] = x
    return out


def gaussian_kernel(fwhm: float, truncation: float = 4.0) -> Kernel:
    """Sampled, unit-sum Gaussian with the given full width at half maximum."""
    if fwhm <= 0:
        raise InvalidArgument(f"fwhm must be positive, got {fwhm}")
    if truncation <= 0:
        raise InvalidArgument(f"truncation must be positive, got {truncation}")
    sigma = fwhm * FWHM_TO_SIGMA
    radius = int(math.floor(truncation * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-0.5 * (offsets / sigma) ** 2)
    taps /= taps.sum()
    # exact mirror symmetry regardless of rounding in the division
    taps = 0.5 * (taps + taps[::-1])
    return Kernel(taps, radius)


def delta_kernel() -> Kernel:
    return Kernel([1.0], 0)
