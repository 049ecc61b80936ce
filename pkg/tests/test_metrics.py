import itertools
import math

import numpy as np
import pytest

from fbsr.errors import DegenerateInput, InvalidArgument
from fbsr.metrics import MetricReport, psnr, rows_to_csv, ssim, wilcoxon_signed_rank
from oracles import wilcoxon_bruteforce


def test_psnr_identical_is_infinite(rng):
    a = rng.uniform(size=(4, 4, 4))
    assert psnr(a, a) == math.inf
    assert psnr(a, a.copy(), peak=1.0) == math.inf


def test_psnr_hand_values():
    a = np.ones((2, 2, 2))
    assert psnr(a, np.zeros_like(a), peak=1.0) == pytest.approx(0.0, abs=1e-12)
    assert psnr(a, a - 0.1, peak=1.0) == pytest.approx(20.0, abs=1e-9)
    with pytest.raises(InvalidArgument):
        psnr(a, np.ones((2, 2, 3)))


def test_psnr_decreases_with_noise(rng):
    a = rng.uniform(size=(8, 8, 8))
    noise = rng.normal(size=a.shape)
    vals = [psnr(a, a + s * noise, peak=1.0) for s in (0.01, 0.05, 0.1, 0.5)]
    assert all(x > y for x, y in zip(vals, vals[1:]))


def test_ssim_properties(rng):
    a = rng.uniform(size=(16, 16, 3))
    b = a + 0.1 * rng.normal(size=a.shape)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    assert ssim(a, b) < 1.0
    assert ssim(a, 1.0 - a, peak=1.0) < 0.0
    assert ssim(a, b, axis=0) <= 1.0


def test_wilcoxon_six_positive():
    res = wilcoxon_signed_rank([1, 2, 3, 4, 5, 6])
    assert res.method == "exact" and res.n == 6 and res.statistic == 21
    assert res.pvalue == pytest.approx(2 / 64, abs=1e-15)


def test_wilcoxon_symmetric_and_zeros():
    res = wilcoxon_signed_rank([1, -1, 2, -2, 0, 0])
    assert res.n == 4 and res.pvalue == 1.0
    with pytest.raises(DegenerateInput):
        wilcoxon_signed_rank([0, 0, 0])


def test_wilcoxon_exact_matches_bruteforce():
    mags = [0.5, 1.0, 1.0, 2.0, 3.5, 3.5, 3.5, 7.0]
    for n in range(1, 9):
        for signs in itertools.product((-1, 1), repeat=n):
            d = [s * m for s, m in zip(signs, mags[:n])]
            w, p = wilcoxon_bruteforce(d)
            res = wilcoxon_signed_rank(d)
            assert res.statistic == w
            assert res.pvalue == pytest.approx(p, abs=1e-12)


def test_wilcoxon_normal_regime_near_exact(rng):
    for _ in range(5):
        d = rng.normal(0.3, 1.0, size=25)
        exact = wilcoxon_signed_rank(d).pvalue
        approx = wilcoxon_signed_rank(d, exact_max_n=0).pvalue
        assert abs(exact - approx) < 0.01
    assert wilcoxon_signed_rank(rng.normal(size=40)).method == "normal"


def test_report_formats():
    rep = MetricReport()
    rep.add("2⊕0", "proposed", math.inf, 1.0, 1.0)
    rep.add("2⊕0", "cubic", 31.234567891, 0.95, 1.0)
    text = rep.to_csv()
    assert text.splitlines()[0] == "label,method,psnr,ssim,peak"
    assert "inf" in text and "31.2346" in text
    assert "nan" in rows_to_csv([{"a": float("nan")}], ["a"])
    summary = {r["method"]: r for r in rep.summary()}
    assert summary["cubic"]["n"] == 1 and summary["cubic"]["psnr_std"] == 0.0
    assert "proposed" in rep.to_table()
