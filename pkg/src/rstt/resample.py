"""Trilinear spatio-temporal resizing and bicubic downsampling."""
from __future__ import annotations

import functools

import numpy as np

from .autograd import Tensor, as_tensor, record
from .errors import DimensionError
from .ops import differentiable


@functools.lru_cache(maxsize=64)
def _linear_taps(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Corner-aligned sampling: ``src = dst * (n_in - 1) / (n_out - 1)``."""
    if n_out == 1 or n_in == 1:
        src = np.zeros(n_out)
    else:
        src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.minimum(np.floor(src).astype(np.intp), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    for arr in (i0, i1, frac):
        arr.setflags(write=False)
    return i0, i1, frac


def _lerp_axis(a: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = a.shape[axis]
    if n_in == n_out:
        return a
    i0, i1, frac = _linear_taps(n_in, n_out)
    shape = [1] * a.ndim
    shape[axis] = n_out
    f = frac.astype(a.dtype).reshape(shape)
    return np.take(a, i0, axis=axis) * (1 - f) + np.take(a, i1, axis=axis) * f


def _lerp_axis_adjoint(g: np.ndarray, axis: int, n_in: int) -> np.ndarray:
    n_out = g.shape[axis]
    if n_in == n_out:
        return g
    i0, i1, frac = _linear_taps(n_in, n_out)
    shape = [1] * g.ndim
    shape[axis] = n_out
    f = frac.astype(g.dtype).reshape(shape)
    gm0 = np.moveaxis(g * (1 - f), axis, 0)
    gm1 = np.moveaxis(g * f, axis, 0)
    out = np.zeros((n_in,) + gm0.shape[1:], dtype=g.dtype)
    np.add.at(out, i0, gm0)
    np.add.at(out, i1, gm1)
    return np.moveaxis(out, 0, axis)


@differentiable("trilinear_resize")
def trilinear_resize(x, t_out: int, h_out: int, w_out: int) -> Tensor:
    """Resize ``x[T, C, H, W]`` linearly along time, height and width.

    Coordinates are corner aligned, so the first and last sample along
    every axis are copied exactly.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"trilinear_resize expects [T, C, H, W], got {x.shape}")
    if min(t_out, h_out, w_out) < 1:
        raise DimensionError("trilinear_resize output sizes must be >= 1")
    T, C, H, W = x.shape
    out = _lerp_axis(x.data, 0, t_out)
    out = _lerp_axis(out, 2, h_out)
    out = _lerp_axis(out, 3, w_out)
    if out is x.data:
        out = x.data.copy()

    def back(g):
        g = _lerp_axis_adjoint(g, 3, W)
        g = _lerp_axis_adjoint(g, 2, H)
        g = _lerp_axis_adjoint(g, 0, T)
        return (g,)

    return record("trilinear_resize", out, (x,), back)


def cubic_kernel(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel; ``a = -0.5`` is Catmull-Rom."""
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


def _reflect_index(j: np.ndarray, n: int) -> np.ndarray:
    # half-sample symmetric reflection: -1 -> 0, n -> n - 1
    period = 2 * n
    j = np.mod(j, period)
    return np.where(j < n, j, period - 1 - j)


@functools.lru_cache(maxsize=32)
def bicubic_weights(n_in: int, factor: int) -> np.ndarray:
    """Dense ``[n_in // factor, n_in]`` antialiased bicubic downsampling matrix.

    The kernel is stretched by ``factor`` (as in MATLAB's ``imresize``) and
    each row is renormalized to sum to one.
    """
    n_out = n_in // factor
    centers = (np.arange(n_out) + 0.5) * factor - 0.5
    support = 2 * factor
    taps = np.arange(-support, support + 1)
    mat = np.zeros((n_out, n_in))
    for i, u in enumerate(centers):
        j = np.floor(u) + taps
        w = cubic_kernel((u - j) / factor)
        w /= w.sum()
        np.add.at(mat[i], _reflect_index(j.astype(np.intp), n_in), w)
    mat.setflags(write=False)
    return mat


def bicubic_downsample(x: np.ndarray, factor: int = 4) -> np.ndarray:
    """Downsample ``x[C, H, W]`` by an integer factor with a Catmull-Rom kernel.

    Works on plain arrays (this is data-pipeline code, not part of the
    differentiable graph). Arithmetic is carried out in float64 and cast
    back to the input dtype.
    """
    x = np.asarray(x)
    if x.ndim != 3:
        raise DimensionError(f"bicubic_downsample expects [C, H, W], got {x.shape}")
    _, H, W = x.shape
    if H % factor or W % factor:
        raise DimensionError(f"bicubic_downsample: {H}x{W} not divisible by {factor}")
    wh = bicubic_weights(H, factor)
    ww = bicubic_weights(W, factor)
    out = wh @ x.astype(np.float64) @ ww.T
    dtype = x.dtype if x.dtype.kind == "f" else np.float32
    return out.astype(dtype)
