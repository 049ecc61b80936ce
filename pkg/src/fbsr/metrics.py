"""PSNR, slice-wise SSIM, the Wilcoxon signed-rank test and report output."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.stats import norm, rankdata

from .errors import DegenerateInput, InvalidArgument

EXACT_MAX_N = 25


def _arrays(a, b):
    a = np.asarray(getattr(a, "voxels", a), dtype=np.float64)
    b = np.asarray(getattr(b, "voxels", b), dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgument(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def default_peak(a, b) -> float:
    a, b = _arrays(a, b)
    return float(max(np.max(np.abs(a)), np.max(np.abs(b))))


def psnr(a, b, peak: float | None = None) -> float:
    """PSNR in dB; ``math.inf`` when the inputs are identical."""
    a, b = _arrays(a, b)
    peak = default_peak(a, b) if peak is None else float(peak)
    if peak <= 0:
        raise InvalidArgument("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _ssim_2d(a, b, c1, c2, sigma):
    f = lambda z: ndimage.gaussian_filter(z, sigma, truncate=3.5, mode="reflect")
    mu_a, mu_b = f(a), f(b)
    var_a = f(a * a) - mu_a * mu_a
    var_b = f(b * b) - mu_b * mu_b
    cov = f(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, peak: float | None = None, axis: int = 2, k1: float = 0.01, k2: float = 0.03,
         sigma: float = 1.5) -> float:
    """Mean local SSIM (11-tap Gaussian window) over the 2D slices indexed by ``axis``."""
    a, b = _arrays(a, b)
    if a.ndim == 2:
        a, b, axis = a[..., None], b[..., None], 2
    peak = default_peak(a, b) if peak is None else float(peak)
    if peak <= 0:
        peak = 1.0
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    a = np.moveaxis(a, axis, 0)
    b = np.moveaxis(b, axis, 0)
    vals = [float(np.mean(_ssim_2d(sa, sb, c1, c2, sigma))) for sa, sb in zip(a, b)]
    return float(min(1.0, max(-1.0, math.fsum(vals) / len(vals))))


# ---------------------------------------------------------------- Wilcoxon

@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float   # sum of ranks of positive differences
    pvalue: float
    n: int
    method: str


def _exact_counts(doubled_ranks):
    """Number of sign assignments producing each doubled positive-rank sum."""
    total = int(sum(doubled_ranks))
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(diffs, exact_max_n: int = EXACT_MAX_N) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test on paired differences.

    Zero differences are dropped. Exact null distribution (tie-aware, by
    counting all 2^n sign patterns) for n <= ``exact_max_n``; otherwise a
    normal approximation with tie and continuity correction.
    """
    d = np.asarray(diffs, dtype=np.float64).reshape(-1)
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise DegenerateInput("all paired differences are zero")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= exact_max_n:
        doubled = np.rint(2 * ranks).astype(int)
        counts = _exact_counts(doubled)
        w2 = int(round(2 * w_plus))
        total = 2 ** n
        lower = sum(counts[: w2 + 1])
        upper = sum(counts[w2:])
        p = min(1.0, 2.0 * float(min(lower, upper)) / total)
        return WilcoxonResult(w_plus, p, n, "exact")
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts ** 3 - tie_counts)) / 48.0
    dev = abs(w_plus - mean) - 0.5
    z = max(dev, 0.0) / math.sqrt(var)
    return WilcoxonResult(w_plus, min(1.0, 2.0 * float(norm.sf(z))), n, "normal")


# ---------------------------------------------------------------- reports

@dataclass
class MetricReport:
    """Rows of per-volume metrics; ``peak`` records the PSNR convention used."""

    rows: list = field(default_factory=list)

    def add(self, label, method, psnr_db, ssim_val, peak):
        self.rows.append({"label": label, "method": method, "psnr": psnr_db,
                          "ssim": ssim_val, "peak": peak})

    def summary(self) -> list:
        groups = {}
        for r in self.rows:
            groups.setdefault(r["method"], []).append(r)
        out = []
        for method, rows in groups.items():
            ps = np.array([r["psnr"] for r in rows])
            ss = np.array([r["ssim"] for r in rows])
            with np.errstate(invalid="ignore"):   # std of an all-inf PSNR group is nan
                ps_std = float(ps.std())
            out.append({"method": method, "n": len(rows),
                        "psnr_mean": float(ps.mean()), "psnr_std": ps_std,
                        "ssim_mean": float(ss.mean()), "ssim_std": float(ss.std())})
        return out

    def to_csv(self) -> str:
        return rows_to_csv(self.rows, ["label", "method", "psnr", "ssim", "peak"])

    def to_table(self) -> str:
        return rows_to_table(self.rows, ["label", "method", "psnr", "ssim", "peak"])


def _fmt(v):
    if isinstance(v, float):
        if math.isinf(v):
            return "inf"
        if math.isnan(v):
            return "nan"
        return f"{v:.6g}"
    return str(v)


def rows_to_csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def rows_to_table(rows, columns) -> str:
    cells = [[_fmt(r[c]) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
    line = lambda vals: "  ".join(v.rjust(w) for v, w in zip(vals, widths))
    return "\n".join([line(columns), line(["-" * w for w in widths])] + [line(r) for r in cells]) + "\n"
