"""Volumes, simulated anisotropic acquisition, internal-supervision datasets
and slice-by-slice super-resolution assembly.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy import signal as sps
from scipy.interpolate import make_interp_spline

from .errors import FormatError, InvalidArgument, InvalidState
from .filterbank import CoefficientSet, FilterBank, analyze_image, synthesize
from .signal import BoundaryMode, Kernel, convolve1d, gaussian_kernel

VOLUME_MAGIC = b"FBV1"
AXES = {"x": 0, "y": 1, "z": 2}


@dataclass
class Volume:
    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float64)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise InvalidArgument(f"volume must be 3D with every dim >= 1, got {self.voxels.shape}")
        if not np.all(np.isfinite(self.voxels)):
            raise InvalidArgument("volume contains non-finite voxels")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise InvalidArgument(f"spacing must be three positive numbers, got {self.spacing}")

    @property
    def dims(self) -> tuple:
        return self.voxels.shape


@dataclass(frozen=True)
class AcquisitionSpec:
    """``fwhm`` and ``gap`` in voxels of the isotropic grid; written ``A⊕B``."""

    fwhm: int
    gap: int = 0
    through_axis: int = 2

    def __post_init__(self):
        if int(self.fwhm) != self.fwhm or int(self.gap) != self.gap:
            raise InvalidArgument("fwhm and gap must be integers")
        if self.fwhm < 1 or self.gap < 0:
            raise InvalidArgument(f"need fwhm >= 1 and gap >= 0, got {self.fwhm}, {self.gap}")
        axis = AXES.get(self.through_axis, self.through_axis)
        if axis not in (0, 1, 2):
            raise InvalidArgument(f"through_axis must be x, y, z or 0..2, got {self.through_axis!r}")
        object.__setattr__(self, "fwhm", int(self.fwhm))
        object.__setattr__(self, "gap", int(self.gap))
        object.__setattr__(self, "through_axis", axis)

    @property
    def M(self) -> int:
        return self.fwhm + self.gap

    @property
    def label(self) -> str:
        return f"{self.fwhm}⊕{self.gap}"

    @property
    def in_plane_axes(self) -> tuple:
        return tuple(a for a in range(3) if a != self.through_axis)

    def slice_profile(self) -> Kernel:
        return gaussian_kernel(self.fwhm)


# ---------------------------------------------------------------- acquisition

def simulate_lr(x: Volume, spec: AcquisitionSpec, profile: Kernel | None = None) -> Volume:
    """Blur along the through-plane axis with the slice profile and keep every M-th slice."""
    t, M = spec.through_axis, spec.M
    if x.dims[t] % M:
        raise InvalidArgument(f"through-plane extent {x.dims[t]} is not divisible by M={M}")
    profile = profile if profile is not None else spec.slice_profile()
    data = np.moveaxis(x.voxels, t, -1)
    y = convolve1d(data, profile, BoundaryMode.REFLECT)[..., ::M]
    spacing = list(x.spacing)
    spacing[t] *= M
    return Volume(np.moveaxis(y, -1, t), tuple(spacing))


def extract_lines(y: Volume, spec: AcquisitionSpec) -> list:
    """Every row and column of every in-plane slice, never crossing the through axis."""
    data = np.moveaxis(y.voxels, spec.through_axis, 0)  # (slices, a, b)
    lines = []
    for sl in data:
        lines.extend(sl)        # lines along b
        lines.extend(sl.T)      # lines along a
    return [np.array(line) for line in lines]


@dataclass
class PatchSampler:
    """Random ``p × pM`` in-plane patches.

    ``orientation`` picks which in-plane axis carries the long side: 0, 1, or
    ``"both"`` for a per-patch coin flip.
    """

    p: int
    M: int
    count: int
    seed: int = 0
    orientation: object = "both"

    @property
    def long_side(self) -> int:
        return self.p * self.M


@dataclass
class TrainPairs:
    inputs: np.ndarray    # (N, p, p)
    targets: np.ndarray   # (N, M-1, p, p)

    def __len__(self):
        return self.inputs.shape[0]

    def __post_init__(self):
        if self.inputs.ndim != 3 or self.targets.ndim != 4:
            raise InvalidArgument("inputs must be (N,p,p) and targets (N,M-1,p,p)")
        if self.targets.shape[0] != self.inputs.shape[0] or self.targets.shape[2:] != self.inputs.shape[1:]:
            raise InvalidArgument(f"inconsistent pair shapes {self.inputs.shape} / {self.targets.shape}")


def extract_patch_pairs(y: Volume, bank: FilterBank, sampler: PatchSampler, spec: AcquisitionSpec) -> TrainPairs:
    """Decimate HR in-plane patches along their long side with the analysis bank.

    Each patch is analysed together with ``ceil(L/M)*M`` samples of context on
    both ends of its long side (zeros beyond the slice edge) and then cropped,
    so its coefficients equal those of whole-line analysis. Analysing the bare
    patch would zero-pad inside the slice and produce edge coefficients that
    never occur at inference.
    """
    if bank.M != sampler.M:
        raise InvalidArgument(f"bank M={bank.M} does not match sampler M={sampler.M}")
    slices = np.moveaxis(y.voxels, spec.through_axis, 0)
    n_slices = slices.shape[0]
    p, long, M = sampler.p, sampler.long_side, sampler.M
    ctx = math.ceil(bank.length / M) * M
    rng = np.random.default_rng(sampler.seed)
    raw = np.empty((sampler.count, p, long + 2 * ctx))
    for i in range(sampler.count):
        orient = sampler.orientation
        if orient == "both":
            orient = int(rng.integers(0, 2))
        s = int(rng.integers(0, n_slices))
        sl = slices[s] if orient == 1 else slices[s].T
        if sl.shape[0] < p or sl.shape[1] < long:
            raise InvalidArgument(f"patch {p}x{long} does not fit in-plane slice {sl.shape}")
        r0 = int(rng.integers(0, sl.shape[0] - p + 1))
        c0 = int(rng.integers(0, sl.shape[1] - long + 1))
        padded = np.pad(sl[r0:r0 + p], ((0, 0), (ctx, ctx)))
        raw[i] = padded[:, c0:c0 + long + 2 * ctx]
    coeffs = analyze_image(raw, bank, axis=-1)
    lo = ctx // M
    crop = lambda a: a[..., lo:lo + p]
    return TrainPairs(crop(coeffs.coarse), np.stack([crop(d) for d in coeffs.details], axis=1))


# ---------------------------------------------------------------- inference

def _tile_starts(n, t):
    stride = max(1, t // 2)
    starts = list(range(0, n - t + 1, stride))
    if starts[-1] != n - t:
        starts.append(n - t)
    return starts


def tile_apply(images, fn, p: int, out_channels: int) -> np.ndarray:
    """Run ``fn`` over overlapping ``p × p`` tiles and overlap-add with uniform weights.

    ``images`` is (N, H, W); ``fn`` maps (B, 1, h, w) to (B, out_channels, h, w).
    Tiles shrink to the image extent when an image is smaller than p.
    """
    images = np.asarray(images, dtype=np.float64)
    N, H, W = images.shape
    th, tw = min(p, H), min(p, W)
    coords = [(r, c) for r in _tile_starts(H, th) for c in _tile_starts(W, tw)]
    acc = np.zeros((N, out_channels, H, W))
    weight = np.zeros((H, W))
    tiles = np.stack([images[:, r:r + th, c:c + tw] for r, c in coords], axis=1)  # (N, T, th, tw)
    pred = fn(tiles.reshape(-1, 1, th, tw)).reshape(N, len(coords), out_channels, th, tw)
    for i, (r, c) in enumerate(coords):
        acc[:, :, r:r + th, c:c + tw] += pred[:, i]
        weight[r:r + th, c:c + tw] += 1.0
    return acc / weight


def _through_margin(bank: FilterBank) -> int:
    return math.ceil(bank.length / bank.M) + 1


def _resolve_plane(y_data, bank, predict, p, t, other):
    """Super-resolve every slice of the plane spanned by ``other`` and ``t``."""
    M = bank.M
    # (slices, other, t)
    remaining = ({0, 1, 2} - {t, other}).pop()
    imgs = np.transpose(y_data, (remaining, other, t))
    margin = _through_margin(bank)
    padded = np.pad(imgs, [(0, 0), (0, 0), (margin, margin)], mode="symmetric")
    if predict is None:
        details = [np.zeros_like(padded)] * (M - 1)
    else:
        det = tile_apply(padded, predict, p, M - 1)
        details = [det[:, k] for k in range(M - 1)]
    hr = synthesize(CoefficientSet(padded, details), bank)
    n_t = imgs.shape[-1]
    hr = hr[..., margin * M:(margin + n_t) * M]
    inv = np.argsort((remaining, other, t))
    return np.transpose(hr, inv)


def _resolve(y: Volume, bank, predict, spec, p):
    t, M = spec.through_axis, spec.M
    if bank.M != M:
        raise InvalidArgument(f"bank M={bank.M} does not match acquisition M={M}")
    a, b = spec.in_plane_axes
    first = _resolve_plane(y.voxels, bank, predict, p, t, a)
    second = _resolve_plane(y.voxels, bank, predict, p, t, b)
    spacing = list(y.spacing)
    spacing[t] /= M
    return Volume(0.5 * (first + second), tuple(spacing))


def super_resolve(y: Volume, bank: FilterBank, G, spec: AcquisitionSpec, p: int | None = None) -> Volume:
    """Regress details from y on both cardinal planes containing the through axis,
    synthesise along it, and average the two stacks."""
    if bank is None or G is None:
        raise InvalidState("super_resolve needs a trained filter bank and regressor")
    if G.M != spec.M:
        raise InvalidArgument(f"regressor M={G.M} does not match acquisition M={spec.M}")
    return _resolve(y, bank, G.predict, spec, p or G.p)


def zero_detail(y: Volume, bank: FilterBank, spec: AcquisitionSpec) -> Volume:
    """Synthesis from the coarse channel alone."""
    if bank is None:
        raise InvalidState("zero_detail needs a filter bank")
    return _resolve(y, bank, None, spec, 1)


def zero_fill(y: Volume, spec: AcquisitionSpec) -> Volume:
    """Fourier zero-padding along the through axis (k-space style upsampling)."""
    t, M = spec.through_axis, spec.M
    n = y.dims[t]
    up = sps.resample(y.voxels, n * M, axis=t)
    spacing = list(y.spacing)
    spacing[t] /= M
    return Volume(up, tuple(spacing))


def cubic_interp(y: Volume, spec: AcquisitionSpec) -> Volume:
    """Cubic spline along the through axis; samples past the last slice hold its value."""
    t, M = spec.through_axis, spec.M
    n = y.dims[t]
    pos = np.minimum(np.arange(n * M) / M, n - 1)
    data = np.moveaxis(y.voxels, t, 0)
    if n == 1:
        up = np.repeat(data, n * M, axis=0)
    else:
        # fewer than four slices cannot carry a cubic; drop the degree
        up = make_interp_spline(np.arange(n), data, k=min(3, n - 1), axis=0)(pos)
    spacing = list(y.spacing)
    spacing[t] /= M
    return Volume(np.moveaxis(up, 0, t), tuple(spacing))


# ---------------------------------------------------------------- phantoms

def _support(dims, rng):
    grids = np.meshgrid(*[np.linspace(-1, 1, n) for n in dims], indexing="ij")
    radii = rng.uniform(0.7, 0.85, size=3)
    r = np.sqrt(sum((g / rr) ** 2 for g, rr in zip(grids, radii)))
    return np.clip((1.0 - r) / 0.08, 0.0, 1.0)


def _normalize(v):
    lo, hi = v.min(), v.max()
    if hi - lo <= 0:
        return np.zeros_like(v)
    return np.clip((v - lo) / (hi - lo), 0.0, 1.0)


def generate_phantom(dims, seed: int = 0, kind: str = "blobs", frequency: float = 0.1,
                     value: float = 0.5) -> Volume:
    """Reproducible synthetic volume with values in [0, 1].

    kinds: ``blobs`` (band-limited Gaussian blobs inside a smooth ellipsoid),
    ``sinusoid`` (plane waves whose wavevectors all have magnitude ``frequency``
    cycles/voxel), ``shapes`` (piecewise-constant ellipsoids with smoothed
    edges), ``texture`` (smoothed noise inside a smooth ellipsoid), ``constant``.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise InvalidArgument(f"dims must be three positive ints, got {dims}")
    rng = np.random.default_rng(seed)
    if kind == "constant":
        return Volume(np.full(dims, float(np.clip(value, 0.0, 1.0))))
    idx = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij")
    if kind == "blobs":
        v = np.zeros(dims)
        for _ in range(24):
            c = [rng.uniform(0.2, 0.8) * n for n in dims]
            s = rng.uniform(2.0, 6.0)
            amp = rng.uniform(0.3, 1.0)
            v += amp * np.exp(-sum((g - cc) ** 2 for g, cc in zip(idx, c)) / (2 * s * s))
        v = _normalize(v) * _support(dims, rng)
    elif kind == "sinusoid":
        v = np.zeros(dims)
        for _ in range(3):
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            phase = rng.uniform(0, 2 * np.pi)
            v += np.cos(2 * np.pi * frequency * sum(g * dd for g, dd in zip(idx, d)) + phase)
        v = _normalize(v)
    elif kind == "shapes":
        v = np.zeros(dims)
        for _ in range(8):
            c = [rng.uniform(0.25, 0.75) * n for n in dims]
            r = [rng.uniform(0.08, 0.25) * n for n in dims]
            inside = sum(((g - cc) / rr) ** 2 for g, cc, rr in zip(idx, c, r)) <= 1.0
            v[inside] = rng.uniform(0.2, 1.0)
        v = _normalize(ndimage.gaussian_filter(v, 1.0))
    elif kind == "texture":
        noise = rng.normal(size=dims)
        v = ndimage.gaussian_filter(noise, 1.5, mode="wrap")
        coarse = ndimage.gaussian_filter(rng.normal(size=dims), 5.0, mode="wrap")
        v = _normalize(0.6 * _normalize(v) + 0.4 * _normalize(coarse)) * _support(dims, rng)
    else:
        raise InvalidArgument(f"unknown phantom kind {kind!r}")
    return Volume(v)


# ---------------------------------------------------------------- file formats

def save_volume(v: Volume, path) -> None:
    """FBV1: magic, u32 dims[3], f32 spacing[3], f32 voxels in C order (little endian)."""
    header = VOLUME_MAGIC + struct.pack("<3I", *v.dims) + struct.pack("<3f", *v.spacing)
    Path(path).write_bytes(header + v.voxels.astype("<f4").tobytes(order="C"))


def load_volume(path) -> Volume:
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != VOLUME_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {VOLUME_MAGIC!r}", 0)
    if len(buf) < 28:
        raise FormatError("truncated header", len(buf))
    dims = struct.unpack_from("<3I", buf, 4)
    spacing = struct.unpack_from("<3f", buf, 16)
    count = dims[0] * dims[1] * dims[2]
    if count == 0:
        raise FormatError(f"zero-sized dims {dims}", 4)
    if len(buf) != 28 + 4 * count:
        raise FormatError(
            f"payload of {len(buf) - 28} bytes does not match dims {dims} ({4 * count} bytes)",
            min(len(buf), 28 + 4 * count),
        )
    vox = np.frombuffer(buf, "<f4", count, 28).reshape(dims).astype(np.float64)
    return Volume(vox, spacing)


def write_pgm(image, path) -> tuple:
    """16-bit binary PGM with linear rescale to [0, 65535]; min/max go to a sidecar."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise InvalidArgument(f"PGM export needs a 2D image, got shape {img.shape}")
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros(img.shape) if hi == lo else (img - lo) / (hi - lo) * 65535.0
    data = np.round(scaled).astype(">u2")
    path = Path(path)
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n65535\n".encode("ascii") + data.tobytes())
    path.with_suffix(".txt").write_text(f"min={lo!r}\nmax={hi!r}\n")
    return lo, hi


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = buf.split(maxsplit=4)
    if parts[0] != b"P5":
        raise FormatError("not a binary PGM", 0)
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 65535:
        raise FormatError(f"expected maxval 65535, got {maxval}", 0)
    return np.frombuffer(parts[4][: 2 * w * h], ">u2").reshape(h, w)


def log_spectrum(image) -> np.ndarray:
    """Centred log-magnitude 2D spectrum."""
    return np.log1p(np.abs(np.fft.fftshift(np.fft.fft2(np.asarray(image, dtype=np.float64)))))
