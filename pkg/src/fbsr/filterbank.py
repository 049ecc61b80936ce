"""M-channel analysis/synthesis filter banks.

Channel k of the analysis side is ``decimate(convolve1d(x, h_k), M, 0)``;
synthesis sums ``convolve1d(upsample_zero(c_k, M), f_k)`` over channels.
Boundaries are zero-padded. Channel 0 is the coarse approximation, which for
an acquired volume is the observation itself.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgument
from .signal import BoundaryMode, Kernel, convolve1d, upsample_zero

BANK_MAGIC = b"FBK1"


@dataclass(frozen=True)
class FilterBank:
    M: int
    analysis: tuple
    synthesis: tuple
    h0_frozen: bool = True

    def __post_init__(self):
        analysis = tuple(self.analysis)
        synthesis = tuple(self.synthesis)
        if self.M < 1:
            raise InvalidArgument(f"M must be >= 1, got {self.M}")
        if len(analysis) != self.M or len(synthesis) != self.M:
            raise InvalidArgument(
                f"need {self.M} analysis and synthesis kernels, "
                f"got {len(analysis)} and {len(synthesis)}"
            )
        lengths = {len(k) for k in analysis + synthesis}
        if len(lengths) != 1:
            raise InvalidArgument(f"all kernels must share one length, got {sorted(lengths)}")
        object.__setattr__(self, "analysis", analysis)
        object.__setattr__(self, "synthesis", synthesis)

    @property
    def length(self) -> int:
        return len(self.analysis[0])

    def analysis_taps(self) -> np.ndarray:
        return np.stack([k.taps for k in self.analysis])

    def synthesis_taps(self) -> np.ndarray:
        return np.stack([k.taps for k in self.synthesis])

    def with_taps(self, analysis_taps, synthesis_taps) -> "FilterBank":
        """New bank with replaced taps and the same centres."""
        return FilterBank(
            self.M,
            tuple(Kernel(t, k.center) for t, k in zip(analysis_taps, self.analysis)),
            tuple(Kernel(t, k.center) for t, k in zip(synthesis_taps, self.synthesis)),
            self.h0_frozen,
        )


@dataclass
class CoefficientSet:
    """Coarse channel plus M-1 detail channels, all of one shape."""

    coarse: np.ndarray
    details: list

    def __post_init__(self):
        self.coarse = np.asarray(self.coarse, dtype=np.float64)
        self.details = [np.asarray(d, dtype=np.float64) for d in self.details]
        for d in self.details:
            if d.shape != self.coarse.shape:
                raise InvalidArgument(
                    f"detail channel shape {d.shape} != coarse shape {self.coarse.shape}"
                )

    @property
    def M(self) -> int:
        return len(self.details) + 1

    def channels(self) -> list:
        return [self.coarse] + self.details

    @classmethod
    def from_array(cls, stacked) -> "CoefficientSet":
        stacked = np.asarray(stacked)
        return cls(stacked[0], list(stacked[1:]))

    def to_array(self) -> np.ndarray:
        return np.stack(self.channels())


def cosine_modulated_init(h0: Kernel, M: int) -> FilterBank:
    """Bank whose analysis filters are cosine modulations of the prototype.

    ``f_k`` starts equal to ``h_k`` for k >= 1 and ``f_0`` equals ``h_0``. Synthesis
    centres are mirrored (``L - 1 - c``) so a time-reversed synthesis filter is
    the exact adjoint of its analysis partner.
    """
    if M < 2:
        raise InvalidArgument(f"cosine modulation needs M >= 2, got {M}")
    n = np.arange(len(h0), dtype=np.float64)
    analysis = [h0]
    for k in range(1, M):
        mod = math.sqrt(2.0 / M) * np.cos((k + 0.5) * (n + (M + 1) / 2.0) * math.pi / M)
        analysis.append(Kernel(h0.taps * mod, h0.center))
    syn_center = len(h0) - 1 - h0.center
    synthesis = [Kernel(k.taps.copy(), syn_center) for k in analysis]
    return FilterBank(M, tuple(analysis), tuple(synthesis), h0_frozen=True)


def _check_divisible(n, M):
    if n % M:
        raise InvalidArgument(f"signal length {n} is not divisible by M={M}")


def analyze(x, bank: FilterBank) -> CoefficientSet:
    """Analysis along the last axis; works on single lines or stacks of lines."""
    x = np.asarray(x, dtype=np.float64)
    _check_divisible(x.shape[-1], bank.M)
    chans = [convolve1d(x, h, BoundaryMode.ZERO_PAD)[..., ::bank.M] for h in bank.analysis]
    return CoefficientSet(chans[0], chans[1:])


def synthesize(c: CoefficientSet, bank: FilterBank) -> np.ndarray:
    if c.M != bank.M:
        raise InvalidArgument(f"coefficient set has {c.M} channels, bank has M={bank.M}")
    out = None
    for ck, f in zip(c.channels(), bank.synthesis):
        s = convolve1d(upsample_zero(ck, bank.M), f, BoundaryMode.ZERO_PAD)
        out = s if out is None else out + s
    return out


def analyze_image(img, bank: FilterBank, axis: int = -1) -> CoefficientSet:
    """Analyse every line of ``img`` along ``axis``; channels keep that axis position."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape[axis] % bank.M:
        raise InvalidArgument(
            f"extent {img.shape[axis]} along axis {axis} is not divisible by M={bank.M}"
        )
    c = analyze(np.moveaxis(img, axis, -1), bank)
    return CoefficientSet(
        np.moveaxis(c.coarse, -1, axis), [np.moveaxis(d, -1, axis) for d in c.details]
    )


def synthesize_image(c: CoefficientSet, bank: FilterBank, axis: int = -1) -> np.ndarray:
    moved = CoefficientSet(
        np.moveaxis(c.coarse, axis, -1), [np.moveaxis(d, axis, -1) for d in c.details]
    )
    return np.moveaxis(synthesize(moved, bank), -1, axis)


def reconstruct(x, bank: FilterBank) -> np.ndarray:
    return synthesize(analyze(x, bank), bank)


def pr_error(bank: FilterBank, probes) -> float:
    """Mean over probes of the per-probe MSE between x and its reconstruction."""
    probes = list(probes)
    if not probes:
        raise InvalidArgument("pr_error needs at least one probe")
    errs = []
    for x in probes:
        x = np.asarray(x, dtype=np.float64)
        errs.append(float(np.mean((reconstruct(x, bank) - x) ** 2)))
    return math.fsum(errs) / len(errs)


def reconstruct_lines(volume, bank: FilterBank, axis: int) -> np.ndarray:
    """Pass every line along ``axis`` through analysis and synthesis.

    Lines are zero-padded on the right up to a multiple of M and cropped back.
    """
    data = np.moveaxis(np.asarray(volume, dtype=np.float64), axis, -1)
    n = data.shape[-1]
    pad = (-n) % bank.M
    if pad:
        data = np.pad(data, [(0, 0)] * (data.ndim - 1) + [(0, pad)])
    rec = reconstruct(data, bank)[..., :n]
    return np.moveaxis(rec, -1, axis)


def save_bank(bank: FilterBank, path) -> None:
    """Write the FBK1 format: magic, u32 M, u32 L, analysis f64, synthesis f64,
    then one u32 centre per kernel (analysis first)."""
    M, L = bank.M, bank.length
    parts = [BANK_MAGIC, struct.pack("<II", M, L)]
    parts.append(bank.analysis_taps().astype("<f8").tobytes())
    parts.append(bank.synthesis_taps().astype("<f8").tobytes())
    centers = [k.center for k in bank.analysis] + [k.center for k in bank.synthesis]
    parts.append(struct.pack(f"<{2 * M}I", *centers))
    Path(path).write_bytes(b"".join(parts))


def load_bank(path) -> FilterBank:
    buf = Path(path).read_bytes()
    if buf[:4] != BANK_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {BANK_MAGIC!r}", 0)
    if len(buf) < 12:
        raise FormatError("truncated header", len(buf))
    M, L = struct.unpack_from("<II", buf, 4)
    if M < 1 or L < 1:
        raise FormatError(f"invalid M={M} or L={L}", 4)
    need = 12 + 2 * M * L * 8 + 2 * M * 4
    if len(buf) != need:
        raise FormatError(f"expected {need} bytes for M={M}, L={L}, got {len(buf)}", min(len(buf), need))
    off = 12
    ana = np.frombuffer(buf, "<f8", M * L, off).reshape(M, L).astype(np.float64)
    off += M * L * 8
    syn = np.frombuffer(buf, "<f8", M * L, off).reshape(M, L).astype(np.float64)
    off += M * L * 8
    centers = struct.unpack_from(f"<{2 * M}I", buf, off)
    for i, c in enumerate(centers):
        if c >= L:
            raise FormatError(f"kernel centre {c} >= L={L}", off + 4 * i)
    return FilterBank(
        M,
        tuple(Kernel(t, c) for t, c in zip(ana, centers[:M])),
        tuple(Kernel(t, c) for t, c in zip(syn, centers[M:])),
        h0_frozen=True,
    )
