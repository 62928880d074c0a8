import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rstt.errors import DimensionError
from rstt.metrics import psnr_y, rgb_to_y, ssim_y


def luma_oracle(img):
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


def ssim_oracle(a, b, size=11, sigma=1.5):
    """Direct sliding-window SSIM with explicitly weighted local moments."""
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-r ** 2 / (2 * sigma ** 2))
    w = np.outer(g, g) / np.outer(g, g).sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    H, W = a.shape
    vals = []
    for i in range(H - size + 1):
        for j in range(W - size + 1):
            pa, pb = a[i:i + size, j:j + size], b[i:i + size, j:j + size]
            ma, mb = np.sum(w * pa), np.sum(w * pb)
            va, vb = np.sum(w * (pa - ma) ** 2), np.sum(w * (pb - mb) ** 2)
            cov = np.sum(w * (pa - ma) * (pb - mb))
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_luma_coefficients():
    assert rgb_to_y(np.array([1.0, 0, 0]).reshape(3, 1, 1)).item() == pytest.approx(0.299, abs=1e-15)
    assert rgb_to_y(np.zeros((3, 2, 2))).max() == 0
    assert rgb_to_y(np.ones((3, 2, 2))).min() == pytest.approx(1.0, abs=1e-15)


@given(st.floats(0, 1))
def test_luma_preserves_gray(v):
    assert rgb_to_y(np.full((3, 2, 2), v)) == pytest.approx(np.full((2, 2), v), abs=1e-15)


def test_luma_channel_check():
    with pytest.raises(DimensionError):
        rgb_to_y(np.zeros((2, 4, 4)))


def test_psnr_identity_cap(rng):
    x = rng.uniform(size=(3, 8, 8))
    assert psnr_y(x, x) == 99.0


def test_psnr_uniform_error():
    assert psnr_y(np.full((3, 8, 8), 0.6), np.full((3, 8, 8), 0.5)) == pytest.approx(20.0, abs=1e-9)


def test_psnr_matches_oracle(rng):
    for _ in range(5):
        a, b = rng.uniform(size=(3, 16, 12)), rng.uniform(size=(3, 16, 12))
        mse = np.mean((luma_oracle(a) - luma_oracle(b)) ** 2)
        assert abs(psnr_y(a, b) - 10 * math.log10(1 / mse)) < 1e-6


def test_psnr_clamps_inputs():
    assert psnr_y(np.full((3, 4, 4), 1.7), np.ones((3, 4, 4))) == 99.0


@given(st.floats(0.01, 0.3), st.floats(0.31, 0.6))
def test_psnr_decreases_with_error(e1, e2):
    gt = np.full((1, 4, 4), 0.2)
    assert psnr_y(gt + e1, gt) > psnr_y(gt + e2, gt)


def test_psnr_permutation_invariant(rng):
    a, b = rng.uniform(size=(3, 6, 6)), rng.uniform(size=(3, 6, 6))
    perm = rng.permutation(36)
    pa = a.reshape(3, 36)[:, perm].reshape(3, 6, 6)
    pb = b.reshape(3, 36)[:, perm].reshape(3, 6, 6)
    assert psnr_y(pa, pb) == pytest.approx(psnr_y(a, b), abs=1e-12)


def test_ssim_identity(rng):
    x = rng.uniform(size=(3, 20, 20))
    assert abs(ssim_y(x, x) - 1.0) < 1e-6


def test_ssim_matches_sliding_window_oracle(rng):
    yy, xx = np.mgrid[0:24, 0:20]
    base = 0.5 + 0.3 * np.sin(xx / 3.0) * np.cos(yy / 4.0)
    a = np.stack([base] * 3)
    b = np.clip(a + 0.05 * rng.standard_normal(a.shape), 0, 1)
    assert abs(ssim_y(a, b) - ssim_oracle(luma_oracle(a), luma_oracle(b))) < 1e-6
    c, d = rng.uniform(size=(3, 16, 18)), rng.uniform(size=(3, 16, 18))
    assert abs(ssim_y(c, d) - ssim_oracle(luma_oracle(c), luma_oracle(d))) < 1e-6


def test_ssim_symmetric_and_bounded(rng):
    for _ in range(5):
        a, b = rng.uniform(size=(2, 3, 12, 14)), rng.uniform(size=(2, 3, 12, 14))
        assert ssim_y(a, b) == ssim_y(b, a)
        assert -1 <= ssim_y(a, 1 - a) <= 1


def test_ssim_averages_frames(rng):
    a, b = rng.uniform(size=(2, 3, 12, 12)), rng.uniform(size=(2, 3, 12, 12))
    assert ssim_y(a, b) == pytest.approx((ssim_y(a[0], b[0]) + ssim_y(a[1], b[1])) / 2, abs=1e-12)


def test_ssim_small_frame_rejected():
    with pytest.raises(DimensionError):
        ssim_y(np.zeros((3, 10, 20)), np.zeros((3, 10, 20)))
    with pytest.raises(DimensionError):
        psnr_y(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))
