"""End-to-end helpers shared by the CLI and the acceptance suite."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .filterbank import FilterBank, reconstruct_lines
from .metrics import psnr, ssim
from .optim import Stage1Config, train_stage1
from .regressor import RegressorConfig, train_stage2
from .volume import (AcquisitionSpec, PatchSampler, Volume, cubic_interp, extract_lines,
                     extract_patch_pairs, generate_phantom, simulate_lr, super_resolve,
                     zero_detail, zero_fill)

AXIS_NAMES = "xyz"
METHODS = ("zero-fill", "cubic", "zero-detail", "proposed")


def stage1_report(x: Volume | None, y: Volume, bank: FilterBank, spec: AcquisitionSpec) -> dict:
    """Volumetric PSNR of bank reconstruction, line by line.

    ``self_<a>`` reconstructs the LR volume along in-plane axis a (training
    data); ``gt_<a>`` reconstructs the HR volume along any axis, including the
    through-plane one.
    """
    out = {}
    for a in spec.in_plane_axes:
        out[f"self_{AXIS_NAMES[a]}"] = psnr(y.voxels, reconstruct_lines(y.voxels, bank, a))
    if x is not None:
        for a in range(3):
            out[f"gt_{AXIS_NAMES[a]}"] = psnr(x.voxels, reconstruct_lines(x.voxels, bank, a))
    return out


def self_psnr(report: dict) -> float:
    vals = [v for k, v in report.items() if k.startswith("self_")]
    return float(np.mean(vals))


def baseline_volumes(y: Volume, bank: FilterBank, spec: AcquisitionSpec) -> dict:
    return {"zero-fill": zero_fill(y, spec), "cubic": cubic_interp(y, spec),
            "zero-detail": zero_detail(y, bank, spec)}


def evaluate(x: Volume, volumes: dict, through_axis: int, peak: float | None = None) -> list:
    """One row per method. The PSNR/SSIM peak defaults to the ground truth maximum."""
    peak = float(np.max(np.abs(x.voxels))) if peak is None else peak
    rows = []
    for method, v in volumes.items():
        rows.append({"method": method, "psnr": psnr(x, v, peak),
                     "ssim": ssim(x, v, peak, axis=through_axis), "peak": peak})
    return rows


def fit_dims(dims, M: int, through_axis: int) -> tuple:
    """Round the through-plane extent up to a multiple of M (phantoms only)."""
    dims = list(dims)
    dims[through_axis] = M * max(1, math.ceil(dims[through_axis] / M))
    return tuple(dims)


@dataclass
class CellResult:
    spec: AcquisitionSpec
    seed: int
    stage1: dict
    metrics: list
    bank: FilterBank
    model: object
    volumes: dict


def run_cell(spec: AcquisitionSpec, seed: int, dims=(64, 64, 64), kind: str = "blobs",
             s1: Stage1Config | None = None, s2: RegressorConfig | None = None,
             pairs: int = 2000, phantom: Volume | None = None) -> CellResult:
    """Simulate, train both stages, super-resolve and score one volume."""
    s1 = s1 or Stage1Config(steps=2000, seed=seed)
    s2 = s2 or RegressorConfig(patch_size=8, steps=500, batch_size=8, seed=seed)
    x = phantom if phantom is not None else generate_phantom(fit_dims(dims, spec.M, spec.through_axis), seed, kind)
    y = simulate_lr(x, spec)
    bank, _ = train_stage1(extract_lines(y, spec), spec.slice_profile(), spec.M, s1)
    train = extract_patch_pairs(y, bank, PatchSampler(s2.patch_size, spec.M, pairs, seed=seed), spec)
    model, _ = train_stage2(train, spec.M, s2)
    volumes = baseline_volumes(y, bank, spec)
    volumes["proposed"] = super_resolve(y, bank, model, spec)
    return CellResult(spec, seed, stage1_report(x, y, bank, spec),
                      evaluate(x, volumes, spec.through_axis), bank, model, volumes)
