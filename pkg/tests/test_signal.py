import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fbsr.errors import InvalidArgument
from fbsr.signal import (BoundaryMode, Kernel, convolve1d, decimate, gaussian_kernel,
                         upsample_zero)
from oracles import conv_matrix

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def test_convolve_hand_evaluated():
    # out[n] = sum_k h[k] x[n-k+1]; the single 1 at x[1] lands h at n = 0..2
    out = convolve1d([0, 1, 0, 0], Kernel([1, 2, 3], 1), BoundaryMode.ZERO_PAD)
    np.testing.assert_array_equal(out, [1, 2, 3, 0])


def test_convolve_identity_and_zero_kernels():
    np.testing.assert_array_equal(convolve1d([5, 5, 5], Kernel([1], 0)), [5, 5, 5])
    np.testing.assert_array_equal(convolve1d([1, 2, 3], Kernel([0, 0], 0)), [0, 0, 0])


def test_empty_kernel_rejected():
    with pytest.raises(InvalidArgument):
        Kernel([], 0)
    with pytest.raises(InvalidArgument):
        Kernel([1, 2], 2)


def test_convolve_matches_dense_matrix(rng):
    for _ in range(50):
        n, L = int(rng.integers(1, 40)), int(rng.integers(1, 9))
        taps, c = rng.normal(size=L), int(rng.integers(0, L))
        x = rng.normal(size=n)
        np.testing.assert_allclose(convolve1d(x, Kernel(taps, c)), conv_matrix(taps, c, n) @ x,
                                   atol=1e-12, rtol=0)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 64), L=st.integers(1, 64), data=st.data())
def test_linearity(n, L, data):
    x = data.draw(arrays(np.float64, n, elements=finite))
    z = data.draw(arrays(np.float64, n, elements=finite))
    taps = data.draw(arrays(np.float64, L, elements=finite))
    a, b = data.draw(finite), data.draw(finite)
    h = Kernel(taps, data.draw(st.integers(0, L - 1)))
    for mode in BoundaryMode:
        lhs = convolve1d(a * x + b * z, h, mode)
        rhs = a * convolve1d(x, h, mode) + b * convolve1d(z, h, mode)
        scale = 1 + np.abs(taps).sum() * (abs(a) + abs(b)) * 10
        np.testing.assert_allclose(lhs, rhs, atol=1e-12 * scale, rtol=0)


def test_impulse_reproduces_taps(rng):
    taps = rng.normal(size=7)
    x = np.zeros(21)
    x[10] = 1.0
    out = convolve1d(x, Kernel(taps, 3))
    # out[n] = taps[n - 10 + 3]
    np.testing.assert_array_equal(out[7:14], taps)


@given(arrays(np.float64, st.integers(1, 50), elements=finite), st.integers(1, 8))
def test_decimate_inverts_upsample(x, M):
    np.testing.assert_array_equal(decimate(upsample_zero(x, M), M, 0), x)


def test_decimate_examples():
    x = [1, 2, 3, 4, 5, 6]
    np.testing.assert_array_equal(decimate(x, 2, 0), [1, 3, 5])
    np.testing.assert_array_equal(decimate(x, 3, 1), [2, 5])
    np.testing.assert_array_equal(decimate(x, 1, 0), x)
    assert decimate(np.arange(7), 3, 2).size == math.ceil((7 - 2) / 3)
    with pytest.raises(InvalidArgument):
        decimate(x, 2, 2)
    with pytest.raises(InvalidArgument):
        decimate(x, 0, 0)


def test_upsample_examples():
    np.testing.assert_array_equal(upsample_zero([1, 2], 3), [1, 0, 0, 2, 0, 0])
    np.testing.assert_array_equal(upsample_zero([7], 1), [7])
    with pytest.raises(InvalidArgument):
        upsample_zero([1], 0)


def test_gaussian_sigma_and_shape():
    # sigma = fwhm / (2 sqrt(2 ln 2)) evaluated by hand for fwhm = 2
    sigma = 2.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))
    assert sigma == pytest.approx(0.849322, abs=1e-6)
    k = gaussian_kernel(2.0)
    assert len(k) == 2 * math.floor(4 * sigma) + 1
    ratio = k.taps[k.center + 1] / k.taps[k.center]
    assert ratio == pytest.approx(math.exp(-0.5 / sigma ** 2), rel=1e-12)


@pytest.mark.parametrize("fwhm", [0.5, 1, 2, 3.7, 4, 6, 11])
def test_gaussian_normalized_symmetric(fwhm):
    k = gaussian_kernel(fwhm)
    assert abs(k.taps.sum() - 1.0) < 1e-12
    c = k.center
    for j in range(1, min(c, len(k) - 1 - c) + 1):
        assert k.taps[c - j] == k.taps[c + j]
    assert np.argmax(k.taps) == c


@pytest.mark.parametrize("fwhm", [1, 2, 4, 6])
def test_constant_is_fixed_point_with_reflect(fwhm):
    x = np.full(17, 3.25)
    np.testing.assert_allclose(convolve1d(x, gaussian_kernel(fwhm), BoundaryMode.REFLECT), x, atol=1e-10)


def test_kernel_reversed_is_adjoint(rng):
    h = Kernel(rng.normal(size=5), 1)
    x, y = rng.normal(size=20), rng.normal(size=20)
    assert np.dot(convolve1d(x, h), y) == pytest.approx(np.dot(x, convolve1d(y, h.reversed())), rel=1e-12)
