import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from domainmap import metrics
from domainmap.metrics import SsimParams
from oracles import brute_ssim


def test_psnr_uniform_offset_closed_form():
    a = np.full((1, 3, 32, 32), 0.25)
    b = a + 16 / 255
    assert metrics.psnr(a, b) == pytest.approx(20 * math.log10(255 / 16), abs=1e-9)
    assert metrics.psnr(a, b) == pytest.approx(24.048, abs=1e-3)


def test_psnr_identical_is_inf():
    a = np.random.default_rng(0).random((1, 3, 8, 8))
    assert metrics.psnr(a, a) == math.inf


def test_psnr_peak_scaling():
    a = np.zeros((1, 1, 4, 4))
    assert metrics.psnr(a, a + 0.1) == pytest.approx(20.0)
    assert metrics.psnr(a * 255, (a + 0.1) * 255, peak=255) == pytest.approx(20.0)


def test_ssim_self_is_one(rng):
    a = rng.random((1, 3, 32, 32))
    assert metrics.ssim(a, a) == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_ssim_matches_direct_summation(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((3, 32, 32))
    b = np.clip(a + rng.normal(0, 0.1 + 0.05 * seed, a.shape), 0, 1)
    assert abs(metrics.ssim(a[None], b[None]) - brute_ssim(a, b)) <= 1e-6


def test_ssim_window_too_large():
    with pytest.raises(ValueError):
        metrics.ssim(np.zeros((1, 1, 8, 8)), np.zeros((1, 1, 8, 8)))


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (1, 2, 12, 12), elements=st.floats(0, 1)),
       arrays(np.float64, (1, 2, 12, 12), elements=st.floats(0, 1)))
def test_ssim_symmetric_and_bounded(a, b):
    s = metrics.ssim(a, b)
    assert s == pytest.approx(metrics.ssim(b, a), abs=1e-12)
    assert -1 - 1e-9 <= s <= 1 + 1e-9


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (1, 1, 6, 6), elements=st.floats(0, 1)),
       arrays(np.float64, (1, 1, 6, 6), elements=st.floats(0, 1)))
def test_psnr_symmetric_nonnegative_mse(a, b):
    assert metrics.mse(a, b) >= 0
    assert metrics.psnr(a, b) == metrics.psnr(b, a)


def test_gaussian_window_normalized():
    g = metrics.gaussian_window(11, 1.5)
    assert g.sum() == pytest.approx(1.0) and g.argmax() == 5


def test_ssim_params_validation():
    with pytest.raises(ValueError):
        SsimParams(window_size=10)


def test_psnr_decreases_with_noise_level():
    from domainmap.degradation import add_noise
    from domainmap.tensor_core import Tensor

    clean = Tensor(np.full((1, 3, 64, 64), 0.5))
    scores = [metrics.psnr(add_noise(clean, db, seed=0), clean) for db in (45, 35, 25)]
    assert scores[0] > scores[1] > scores[2]
