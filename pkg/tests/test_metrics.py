import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from biplanar.errors import ParameterError
from biplanar.metrics import PSNR_IDENTICAL, gaussian_window, psnr, psnr_from_mse, ssim


def test_psnr_closed_form():
    assert psnr_from_mse(0.01) == 20.0
    a = np.zeros((10, 10))
    b = a.copy()
    b[3, 4] = 1.0  # MSE = 1 / 100
    assert psnr(a, b) == 20.0
    assert psnr(a, b, data_range=2.0) == pytest.approx(20 + 20 * math.log10(2), abs=1e-12)


def test_identical_images(rng):
    a = rng.random((32, 32))
    assert psnr(a, a) == PSNR_IDENTICAL == math.inf
    assert abs(ssim(a, a) - 1.0) <= 1e-9


def test_ssim_symmetric(rng):
    for _ in range(10):
        a, b = rng.random((2, 24, 30))
        assert abs(ssim(a, b) - ssim(b, a)) <= 1e-9


def test_ssim_anticorrelated_binary(rng):
    a = (rng.random((32, 32)) > 0.5).astype(float)
    assert ssim(a, 1 - a) < 0


def test_psnr_monotone_in_noise(rng):
    a = rng.random((64, 64))
    noise = rng.standard_normal((64, 64))
    values = [psnr(a, a + s * noise) for s in (0.01, 0.05, 0.1)]
    assert values[0] > values[1] > values[2]
    ssims = [ssim(a, np.clip(a + s * noise, 0, 1)) for s in (0.01, 0.05, 0.1)]
    assert ssims[0] > ssims[1] > ssims[2]


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), h=st.integers(11, 30), w=st.integers(11, 30))
def test_ssim_range_and_psnr_nonnegative(seed, h, w):
    rng = np.random.default_rng(seed)
    a, b = rng.random((2, h, w))
    assert -1.0 <= ssim(a, b) <= 1.0
    assert psnr(a, b) >= 0.0


def test_ssim_against_direct_window_loop(rng):
    a, b = rng.random((2, 14, 13))
    g = gaussian_window()
    w2 = np.outer(g, g)
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for i in range(14 - 10):
        for j in range(13 - 10):
            pa, pb = a[i:i + 11, j:j + 11], b[i:i + 11, j:j + 11]
            ma, mb = np.sum(w2 * pa), np.sum(w2 * pb)
            va, vb = np.sum(w2 * pa * pa) - ma**2, np.sum(w2 * pb * pb) - mb**2
            cov = np.sum(w2 * pa * pb) - ma * mb
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    assert abs(ssim(a, b) - np.mean(vals)) <= 1e-12


def test_metric_errors():
    with pytest.raises(ParameterError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ParameterError):
        ssim(np.zeros((16, 16)), np.zeros((16, 17)))
    with pytest.raises(ParameterError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))
    with pytest.raises(ParameterError):
        psnr_from_mse(-1.0)
