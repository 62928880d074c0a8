"""Luma PSNR / SSIM."""
from __future__ import annotations

import functools

import numpy as np
from scipy import signal

from .errors import DimensionError

PSNR_CAP = 99.0
LUMA = np.array([0.299, 0.587, 0.114])
SSIM_SIZE = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _frame(x) -> np.ndarray:
    return np.clip(np.asarray(getattr(x, "data", x), dtype=np.float64), 0.0, 1.0)


def rgb_to_y(frame) -> np.ndarray:
    """Full-range BT.601 luma of ``[..., 3, H, W]``; returns ``[..., H, W]``."""
    f = np.asarray(getattr(frame, "data", frame), dtype=np.float64)
    if f.ndim < 3 or f.shape[-3] != 3:
        raise DimensionError(f"rgb_to_y expects 3 channels at axis -3, got {f.shape}")
    return np.tensordot(LUMA, np.moveaxis(f, -3, 0), axes=1)


def _luma(x) -> np.ndarray:
    f = _frame(x)
    if f.ndim >= 3 and f.shape[-3] == 3:
        return rgb_to_y(f)
    if f.ndim >= 3 and f.shape[-3] == 1:
        return f[..., 0, :, :]
    return f


def psnr_y(pred, gt) -> float:
    """``10 log10(1 / MSE)`` on luma; ``99.0`` when the frames are identical."""
    a, b = _luma(pred), _luma(gt)
    if a.shape != b.shape:
        raise DimensionError(f"psnr_y: shapes differ {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


@functools.lru_cache(maxsize=4)
def gaussian_window(size: int = SSIM_SIZE, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    w = np.outer(g, g)
    w.setflags(write=False)
    return w


def _ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    w = gaussian_window()

    def filt(z):
        return signal.correlate2d(z, w, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a * mu_a
    sbb = filt(b * b) - mu_b * mu_b
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * sab + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (saa + sbb + SSIM_C2)
    return num / den


def ssim_y(pred, gt) -> float:
    """Mean SSIM over the valid region of an 11x11 Gaussian (sigma 1.5) window.

    Stacks of frames (``[..., H, W]`` after luma conversion) are averaged
    frame by frame.
    """
    a, b = _luma(pred), _luma(gt)
    if a.shape != b.shape:
        raise DimensionError(f"ssim_y: shapes differ {a.shape} vs {b.shape}")
    if a.shape[-1] < SSIM_SIZE or a.shape[-2] < SSIM_SIZE:
        raise DimensionError(f"ssim_y: frame {a.shape[-2:]} smaller than the {SSIM_SIZE}x{SSIM_SIZE} window")
    a2 = a.reshape(-1, *a.shape[-2:])
    b2 = b.reshape(-1, *b.shape[-2:])
    # every term in the map is symmetric in (a, b), so swapping is bit-exact
    vals = [float(np.mean(_ssim_map(x, y))) for x, y in zip(a2, b2)]
    return float(np.clip(np.mean(vals), -1.0, 1.0))
