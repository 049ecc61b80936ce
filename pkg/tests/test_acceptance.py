"""Acceptance criteria. Each test appends one PASS/FAIL line, printed at the end of the run."""
import filecmp
import itertools
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, dyadic_haar, orthonormal_haar, random_bank
from fbsr.cli import main
from fbsr.filterbank import analyze, pr_error, reconstruct, synthesize
from fbsr.metrics import psnr, wilcoxon_signed_rank
from fbsr.optim import Stage1Config, bank_from_params, bank_params, loss_and_grad, train_stage1
from fbsr.pipeline import self_psnr, stage1_report
from fbsr.regressor import ConvRegressor, RegressorConfig, net_forward, train_stage2
from fbsr.volume import (AcquisitionSpec, PatchSampler, extract_lines, extract_patch_pairs,
                         generate_phantom, simulate_lr, super_resolve, zero_detail)
from oracles import analysis_matrices, rel_err, synthesis_matrices, wilcoxon_bruteforce


def record(number, name, ok, detail):
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] {number}. {name}: {detail}")
    assert ok, detail


# ---------------------------------------------------------------- 1

def test_matrix_oracle_equivalence():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        M = int(rng.integers(1, 5))
        n = M * int(rng.integers(1, 32 // M + 1))
        L = int(rng.integers(1, 9))
        bank = random_bank(rng, M, L)
        x = rng.normal(size=n)
        ana = analysis_matrices([k.taps for k in bank.analysis], [k.center for k in bank.analysis], n, M)
        syn = synthesis_matrices([k.taps for k in bank.synthesis], [k.center for k in bank.synthesis], n, M)
        c = analyze(x, bank)
        for ch, A in zip(c.channels(), ana):
            worst = max(worst, float(np.max(np.abs(ch - A @ x))))
        dense = sum(S @ (A @ x) for S, A in zip(syn, ana))
        worst = max(worst, float(np.max(np.abs(synthesize(c, bank) - dense))))
    elapsed = time.perf_counter() - start
    record(1, "matrix-oracle equivalence", worst <= 1e-12 and elapsed < 10,
           f"max abs deviation {worst:.2e} (tol 1e-12) over 200 cases, {elapsed:.2f}s (< 10s)")


# ---------------------------------------------------------------- 2

def test_pr_certificate():
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    normal_probes = [rng.normal(size=int(rng.integers(1, 33)) * 2) for _ in range(20)]
    err_ortho = pr_error(orthonormal_haar(), normal_probes)
    err_dyadic = pr_error(dyadic_haar(), normal_probes)
    # dyadic-rational probes keep every product and sum exact, so the reconstruction is bit-identical
    exact_probes = [rng.integers(-2 ** 20, 2 ** 20, size=64) / 2 ** 10 for _ in range(20)]
    bank = dyadic_haar()
    all_inf = all(psnr(p, reconstruct(p, bank)) == math.inf for p in exact_probes)
    elapsed = time.perf_counter() - start
    ok = err_ortho <= 1e-18 and err_dyadic <= 1e-18 and all_inf and elapsed < 1
    record(2, "PR certificate", ok,
           f"pr_error {err_ortho:.1e} / {err_dyadic:.1e} (tol 1e-18), PSNR infinite on all probes: "
           f"{all_inf}, {elapsed:.3f}s (< 1s)")


# ---------------------------------------------------------------- 3

def _filter_draw(rng):
    M = int(rng.integers(2, 5))
    L = int(rng.integers(M, 4 * M + 1))
    bank = random_bank(rng, M, L)
    batch = rng.normal(size=(int(rng.integers(1, 5)), M * int(rng.integers(L // M + 1, 12))))
    params = bank_params(bank)
    _, grads = loss_and_grad(bank, batch)
    worst = 0.0
    eps = 1e-3   # the loss is exactly quadratic in any single tap
    for name, p in params.items():
        for i in range(p.size):
            up, dn = dict(params), dict(params)
            up[name], dn[name] = p.copy(), p.copy()
            up[name].flat[i] += eps
            dn[name].flat[i] -= eps
            num = (loss_and_grad(bank_from_params(bank, up), batch)[0]
                   - loss_and_grad(bank_from_params(bank, dn), batch)[0]) / (2 * eps)
            worst = max(worst, rel_err(num, grads[name].flat[i], 1e-6))
    return worst


def _kink_signature(model, y, t):
    """Signs at every non-differentiable point of the objective: the L1 residual and all
    leaky-ReLU pre-activations of the generator (and discriminator when present)."""
    pred, cache = net_forward(model.params, y, model.blocks)
    sig = [pred > t] + [v > 0 for k, v in cache.items() if k.endswith("z") or k.endswith("z1")]
    if model.adversarial:
        x = np.concatenate([y, pred], axis=1)
        _, dcache = net_forward(model.disc_params, x, model.DISC_BLOCKS)
        sig += [v > 0 for k, v in dcache.items() if k.endswith("z") or k.endswith("z1")]
    return np.concatenate([s.ravel() for s in sig])


def _network_draw(rng, entries=20):
    M = int(rng.integers(2, 5))
    adversarial = bool(rng.integers(0, 2))
    cfg = RegressorConfig(residual_blocks=1, base_features=2, patch_size=8, adversarial=adversarial,
                          adversarial_weight=float(rng.uniform(0.1, 2)), dtype="float64")
    model = ConvRegressor(M, 8, 1, 2, adversarial=adversarial, seed=int(rng.integers(2 ** 31)))
    model.params["out.w"] = rng.normal(scale=0.3, size=model.params["out.w"].shape)
    y = rng.normal(size=(2, 1, 8, 8))
    t = rng.normal(size=(2, M - 1, 8, 8))
    _, grads, _ = model.generator_loss_and_grad(y, t, cfg)
    names = list(model.params)
    eps = 1e-6
    worst, checked, tries = 0.0, 0, 0
    while checked < entries and tries < 10 * entries:
        tries += 1
        name = names[int(rng.integers(len(names)))]
        p = model.params[name]
        i = int(rng.integers(p.size))
        old = p.flat[i]
        p.flat[i] = old + eps
        lp, sp = model.generator_loss_and_grad(y, t, cfg)[0], _kink_signature(model, y, t)
        p.flat[i] = old - eps
        lm, sm = model.generator_loss_and_grad(y, t, cfg)[0], _kink_signature(model, y, t)
        p.flat[i] = old
        if not np.array_equal(sp, sm):
            continue   # the difference straddles a kink; the derivative is undefined there
        worst = max(worst, rel_err((lp - lm) / (2 * eps), grads[name].flat[i], 1e-4))
        checked += 1
    return worst, checked


def test_gradient_oracles():
    rng = np.random.default_rng(31)
    start = time.perf_counter()
    filt = max(_filter_draw(rng) for _ in range(100))
    draws = [_network_draw(rng) for _ in range(100)]
    net = max(w for w, _ in draws)
    enough = all(c >= 20 for _, c in draws)
    elapsed = time.perf_counter() - start
    ok = filt < 1e-5 and net < 1e-4 and enough and elapsed < 120
    record(3, "gradient oracles", ok,
           f"filters max rel err {filt:.1e} (< 1e-5), network {net:.1e} (< 1e-4), "
           f"100 + 100 draws, {elapsed:.1f}s (< 120s)")


# ---------------------------------------------------------------- 4, 5

def _stage1(spec, seed, steps):
    x = generate_phantom((64, 64, 64), seed, "blobs")
    y = simulate_lr(x, spec)
    bank, _ = train_stage1(extract_lines(y, spec), spec.slice_profile(), spec.M,
                           Stage1Config(steps=steps, seed=seed))
    return stage1_report(x, y, bank, spec)


@pytest.mark.slow
def test_stage1_desk_scale():
    spec = AcquisitionSpec(2, 0)
    start = time.perf_counter()
    reports = [_stage1(spec, seed, 5000) for seed in (0, 1, 2)]
    elapsed = time.perf_counter() - start
    selfs = [min(r["self_x"], r["self_y"]) for r in reports]
    gaps = [self_psnr(r) - r["gt_z"] for r in reports]
    ok = min(selfs) >= 40 and max(gaps) <= 10 and elapsed < 600
    record(4, "stage 1 desk-scale 2⊕0", ok,
           f"self PSNR min {min(selfs):.2f} dB (>= 40), self minus through-plane GT PSNR "
           f"max {max(gaps):.2f} dB (<= 10), 3 seeds, {elapsed:.0f}s (< 600s)")


@pytest.mark.slow
def test_stage1_trend():
    seeds = range(5)
    m2 = [self_psnr(_stage1(AcquisitionSpec(2, 0), s, 2000)) for s in seeds]
    m8 = [self_psnr(_stage1(AcquisitionSpec(6, 2), s, 2000)) for s in seeds]
    ok = np.mean(m2) > np.mean(m8)
    record(5, "stage 1 trend M=2 vs M=8", ok,
           f"mean self PSNR {np.mean(m2):.2f} dB (2⊕0) > {np.mean(m8):.2f} dB (6⊕2), 5 seeds")


# ---------------------------------------------------------------- 6

def _stage2_cell(spec, dims, steps):
    x = generate_phantom(dims, 11, "texture")
    held = generate_phantom(dims, 12, "texture")
    y, y_held = simulate_lr(x, spec), simulate_lr(held, spec)
    bank, _ = train_stage1(extract_lines(y, spec), spec.slice_profile(), spec.M,
                           Stage1Config(steps=3000, seed=0))
    cfg = RegressorConfig(residual_blocks=4, base_features=8, patch_size=12, steps=steps,
                          batch_size=8, max_lr=1e-3, seed=0)
    train = extract_patch_pairs(y, bank, PatchSampler(12, spec.M, 2000, seed=0), spec)
    model, _ = train_stage2(train, spec.M, cfg)
    test = extract_patch_pairs(y_held, bank, PatchSampler(12, spec.M, 500, seed=1), spec)
    pred = model.predict(test.inputs[:, None])
    ratio = float(np.mean((pred - test.targets) ** 2) / np.mean(test.targets ** 2))
    peak = float(np.max(x.voxels))
    sr = psnr(x, super_resolve(y, bank, model, spec), peak)
    zd = psnr(x, zero_detail(y, bank, spec), peak)
    return ratio, sr, zd


@pytest.mark.slow
def test_stage2_gain():
    start = time.perf_counter()
    results = {}
    for spec, dims in ((AcquisitionSpec(2, 0), (64, 64, 64)), (AcquisitionSpec(4, 1), (64, 64, 60))):
        results[spec.label] = _stage2_cell(spec, dims, 10_000)
    elapsed = time.perf_counter() - start
    ok = all(r <= 0.8 and sr >= zd for r, sr, zd in results.values()) and elapsed < 1200
    detail = "; ".join(f"{lab}: held-out MSE ratio {r:.3f} (<= 0.8), SR {sr:.2f} dB vs zero-detail {zd:.2f} dB"
                       for lab, (r, sr, zd) in results.items())
    record(6, "stage 2 gain", ok, f"{detail}; {elapsed:.0f}s (< 1200s)")


# ---------------------------------------------------------------- 7

@pytest.mark.slow
def test_shape_and_dc_laws():
    """Each cell runs the self-supervised pipeline on a constant phantom, as the method
    always trains on the volume it super-resolves. In-plane extent 128 keeps p x pM
    training patches clear of the slice edges at M = 8."""
    failures, worst = [], 0.0
    for fwhm, gap in itertools.product((2, 4, 6), (0, 1, 2)):
        spec = AcquisitionSpec(fwhm, gap)
        M = spec.M
        x = generate_phantom((128, 128, 4 * M), 0, "constant", value=0.5)
        y = simulate_lr(x, spec)
        bank, _ = train_stage1(extract_lines(y, spec), spec.slice_profile(), M,
                               Stage1Config(steps=1000, batch_size=16, seed=0))
        cfg = RegressorConfig(residual_blocks=1, base_features=4, patch_size=8, steps=300, batch_size=8)
        model, _ = train_stage2(extract_patch_pairs(y, bank, PatchSampler(8, M, 200), spec), M, cfg)
        out = super_resolve(y, bank, model, spec)
        shape_ok = out.dims[:2] == y.dims[:2] and out.dims[2] == M * y.dims[2]
        dc = abs(float(out.voxels.mean()) - float(y.voxels.mean())) / float(y.voxels.mean())
        worst = max(worst, dc)
        if not shape_ok or dc > 0.05:
            failures.append(f"{spec.label} dims {out.dims} DC error {dc:.3f}")
    record(7, "shape and DC laws", not failures,
           f"9 cells, through extent = M x LR extent, worst DC deviation {100 * worst:.2f}% (<= 5%)"
           + (f"; failing: {failures}" if failures else ""))


# ---------------------------------------------------------------- 8

@pytest.mark.slow
def test_determinism(tmp_path):
    args = ["--set", "phantom_dims=48,48,48", "--set", "fwhm=2", "--set", "gap=1",
            "--set", "stage1_steps=300", "--set", "stage1_batch=8", "--set", "stage2_steps=60",
            "--set", "patch_size=8", "--set", "pairs=200", "--set", "blocks=2", "--set", "features=4",
            "--seed", "3"]
    for run in ("a", "b"):
        for cmd in ("simulate", "stage1", "stage2", "sr", "eval"):
            assert main([cmd, *args, "--out", str(tmp_path / run)]) == 0
    names = ["hr.fbv", "lr.fbv", "bank.fbk", "model.rgr", "sr.fbv", "zero-fill.fbv", "cubic.fbv",
             "zero-detail.fbv", "stage1_loss.csv", "stage1_report.csv", "stage2_loss.csv", "metrics.csv"]
    _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    record(8, "determinism", not mismatch and not errors,
           f"{len(names) - len(mismatch) - len(errors)}/{len(names)} artefacts byte-identical"
           + (f"; differing: {mismatch + errors}" if mismatch or errors else ""))


# ---------------------------------------------------------------- 9

def test_wilcoxon_correctness():
    rng = np.random.default_rng(5)
    checked, bad = 0, []
    for n in range(1, 11):
        distinct = np.arange(1, n + 1) * 0.5
        tied = np.sort(rng.integers(1, max(2, n // 2) + 1, size=n)).astype(float)
        for mags in (distinct, tied):
            for signs in itertools.product((-1.0, 1.0), repeat=n):
                d = mags * np.array(signs)
                w, p = wilcoxon_bruteforce(d)
                res = wilcoxon_signed_rank(d)
                checked += 1
                if res.statistic != w or abs(res.pvalue - p) > 1e-12:
                    bad.append((n, tuple(d)))
    p6 = wilcoxon_signed_rank([0.4, 1.1, 2.0, 0.7, 3.3, 1.9]).pvalue
    ok = not bad and p6 == 0.03125
    record(9, "Wilcoxon correctness", ok,
           f"{checked} sign patterns n <= 10 match brute force ({len(bad)} mismatches), "
           f"six same-sign p = {p6} (expect 0.03125)")
