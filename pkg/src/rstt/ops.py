"""Differentiable primitives over :class:`~rstt.autograd.Tensor`.

Every function here accepts tensors (or array-likes, treated as constants)
and returns a new tensor. Spatial ops come in channels-last form
(``*_nhwc``), which is the layout the network keeps its features in, plus
the channels-first wrappers ``conv2d`` / ``conv_transpose2d``.
"""
from __future__ import annotations

import math

import numpy as np
import numba

from .autograd import Tensor, as_tensor, record, recording
from .errors import DimensionError, NonFiniteError

# Names of all ops that put nodes on the tape; the grad-check harness must
# cover each of them.
DIFFERENTIABLE_OPS: list[str] = []


def differentiable(name: str):
    def deco(fn):
        if name not in DIFFERENTIABLE_OPS:
            DIFFERENTIABLE_OPS.append(name)
        return fn

    return deco


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else np.asarray(x), dtype=dtype)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = as_tensor(b)
    return _lift(a, b), b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------

@differentiable("add")
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return record(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


@differentiable("sub")
def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return record(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


@differentiable("mul")
def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return record(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


@differentiable("div")
def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * a.data / b.data, b.shape)

    return record("div", a.data / b.data, (a, b), back)


@differentiable("neg")
def neg(x) -> Tensor:
    x = as_tensor(x)
    return record("neg", -x.data, (x,), lambda g: (-g,))


@differentiable("power")
def power(x, p: float) -> Tensor:
    x = as_tensor(x)
    return record(
        "power", x.data ** p, (x,), lambda g: (g * p * x.data ** (p - 1),)
    )


@differentiable("exp")
def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return record("exp", out, (x,), lambda g: (g * out,))


@differentiable("sqrt")
def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return record("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


@differentiable("relu")
def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return record("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


@numba.njit(cache=True, nogil=True)
def _gelu_kernel(x, out, cdf, store):  # pragma: no cover - compiled
    c = x.dtype.type(_INV_SQRT2)
    half = x.dtype.type(0.5)
    for i in range(x.size):
        v = x[i]
        p = half * math.erfc(-v * c)
        if store:
            cdf[i] = p
        out[i] = v * p


@differentiable("gelu")
def gelu(x) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with ``Phi`` written through ``erfc``."""
    x = as_tensor(x)
    flat = np.ascontiguousarray(x.data).reshape(-1)
    out = np.empty_like(flat)
    store = recording(x)  # Phi is only kept for the backward pass
    cdf = np.empty_like(flat) if store else np.empty(1, flat.dtype)
    _gelu_kernel(flat, out, cdf, store)
    out = out.reshape(x.shape)
    if not store:
        return record("gelu", out, (x,), None)
    cdf = cdf.reshape(x.shape)

    def back(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return record("gelu", out, (x,), back)


# -- reductions -----------------------------------------------------------

@differentiable("sum")
def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return record("sum", np.asarray(out, dtype=x.dtype), (x,), back)


@differentiable("mean")
def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    count = x.size // max(np.asarray(out).size, 1)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape),)

    return record("mean", np.asarray(out, dtype=x.dtype), (x,), back)


# -- shape manipulation ---------------------------------------------------

@differentiable("reshape")
def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


@differentiable("transpose")
def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record(
        "transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
        lambda g: (g.transpose(inv),),
    )


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


@differentiable("getitem")
def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    out = np.array(x.data[index], copy=True)
    basic = _is_basic_index(index)

    def back(g):
        gi = np.zeros_like(x.data)
        if basic:
            gi[index] = g
        else:
            np.add.at(gi, index, g)
        return (gi,)

    return record("getitem", out, (x,), back)


@differentiable("take")
def take(x, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with integer ``indices`` (repeats allowed)."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    out = np.take(x.data, idx, axis=axis)

    def back(g):
        gi = np.zeros(np.moveaxis(x.data, axis, 0).shape, dtype=x.dtype)
        gm = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
        gm = gm.reshape((idx.size,) + gi.shape[1:])
        np.add.at(gi, idx.ravel(), gm)
        return (np.moveaxis(gi, 0, axis),)

    return record("take", out, (x,), back)


@differentiable("concat")
def concat(xs, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record("concat", out, xs, back)


@differentiable("stack")
def stack(xs, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.stack([x.data for x in xs], axis=axis)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return record("stack", out, xs, back)


@differentiable("roll")
def roll(x, shift, axis) -> Tensor:
    x = as_tensor(x)
    neg_shift = tuple(-s for s in shift) if isinstance(shift, (tuple, list)) else -shift
    return record(
        "roll", np.roll(x.data, shift, axis=axis), (x,),
        lambda g: (np.roll(g, neg_shift, axis=axis),),
    )


def reflect_pad(x, pads, axes) -> Tensor:
    """Pad the trailing end of each axis in ``axes`` by reflection (edge excluded)."""
    x = as_tensor(x)
    for pad, axis in zip(pads, axes):
        if pad == 0:
            continue
        n = x.shape[axis]
        j = np.arange(n + pad)
        if n > 1:
            # repeated reflection for pads longer than the axis
            period = 2 * (n - 1)
            j = np.mod(j, period)
            j = np.where(j < n, j, period - j)
        else:
            j = np.zeros_like(j)
        x = take(x, j, axis=axis)
    return x


# -- linear algebra -------------------------------------------------------

@differentiable("matmul")
def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul batch dimensions incompatible: {a.shape} @ {b.shape}") from exc

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record("matmul", out, (a, b), back)


@differentiable("linear")
def linear(x, w, b=None) -> Tensor:
    """``x[..., Cin] @ w[Cin, Cout] + b[Cout]`` as a single 2-D GEMM."""
    x = as_tensor(x)
    w = _lift(w, x)
    cin, cout = w.shape
    if x.shape[-1] != cin:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight rows {cin}")
    x2 = x.data.reshape(-1, cin)
    out = x2 @ w.data
    inputs = [x, w]
    if b is not None:
        b = _lift(b, x)
        out += b.data
        inputs.append(b)
    out = out.reshape(x.shape[:-1] + (cout,))

    def back(g):
        g2 = g.reshape(-1, cout)
        grads = [(g2 @ w.data.T).reshape(x.shape), x2.T @ g2]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return record("linear", out, inputs, back)


@differentiable("softmax")
def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for {x.ndim}-D input")
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def back(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return record("softmax", out, (x,), back)


@differentiable("layer_norm")
def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x = as_tensor(x)
    gamma, beta = _lift(gamma, x), _lift(beta, x)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm affine shape must be ({c},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def back(g):
        gx_hat = g * gamma.data
        gx = rstd * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        red = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return record("layer_norm", out.astype(x.dtype, copy=False), (x, gamma, beta), back)


def mlp(x, w1, b1, w2, b2) -> Tensor:
    """Two-layer perceptron with an exact GELU in between."""
    return linear(gelu(linear(x, w1, b1)), w2, b2)


# -- convolutions ---------------------------------------------------------

def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


@differentiable("conv2d")
def conv2d_nhwc(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation on ``x[B, H, W, Cin]`` with ``w[Cout, Cin, k, k]``."""
    x = as_tensor(x)
    w = _lift(w, x)
    B, H, W, cin = x.shape
    cout, wcin, k, k2 = w.shape
    if wcin != cin or k != k2:
        raise DimensionError(f"conv2d: input {x.shape} does not match weight {w.shape}")
    ho, wo = _conv_out(H, k, stride, pad), _conv_out(W, k, stride, pad)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: input {H}x{W} too small for kernel {k}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    out = np.zeros((B * ho * wo, cout), dtype=x.dtype)
    # per-tap [cin, cout] weights, contiguous so matmul hits BLAS
    wt = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0))
    taps = []
    for p in range(k):
        for q in range(k):
            xs = xp[:, p:p + stride * (ho - 1) + 1:stride, q:q + stride * (wo - 1) + 1:stride, :]
            xs = xs.reshape(-1, cin)
            taps.append(xs)
            out += xs @ wt[p, q]
    inputs = [x, w]
    if b is not None:
        b = _lift(b, x)
        out += b.data
        inputs.append(b)
    out = out.reshape(B, ho, wo, cout)

    def back(g):
        g2 = g.reshape(-1, cout)
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for i, (p, q) in enumerate((p, q) for p in range(k) for q in range(k)):
            gxp[:, p:p + stride * (ho - 1) + 1:stride, q:q + stride * (wo - 1) + 1:stride, :] += (
                g2 @ wt[p, q].T
            ).reshape(B, ho, wo, cin)
            gw[:, :, p, q] = g2.T @ taps[i]
        gx = gxp[:, pad:pad + H, pad:pad + W, :] if pad else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return record("conv2d", out, inputs, back)


@differentiable("conv_transpose2d")
def conv_transpose2d_nhwc(x, w, b=None, stride: int = 2, pad: int = 0, output_padding: int = 0) -> Tensor:
    """Transposed convolution on ``x[B, H, W, Cin]`` with ``w[Cin, Cout, k, k]``.

    Output side is ``(H - 1) * stride - 2 * pad + k + output_padding``; this
    is the adjoint of :func:`conv2d_nhwc` with the same weight array.
    """
    x = as_tensor(x)
    w = _lift(w, x)
    B, H, W, cin = x.shape
    wcin, cout, k, k2 = w.shape
    if wcin != cin or k != k2:
        raise DimensionError(f"conv_transpose2d: input {x.shape} does not match weight {w.shape}")
    hf = (H - 1) * stride + k + output_padding
    wf = (W - 1) * stride + k + output_padding
    full = np.zeros((B, hf, wf, cout), dtype=x.dtype)
    x2 = x.data.reshape(-1, cin)
    wt = np.ascontiguousarray(w.data.transpose(2, 3, 0, 1))
    for p in range(k):
        for q in range(k):
            full[:, p:p + stride * (H - 1) + 1:stride, q:q + stride * (W - 1) + 1:stride, :] += (
                x2 @ wt[p, q]
            ).reshape(B, H, W, cout)
    out = full[:, pad:hf - pad, pad:wf - pad, :]
    if out.shape[1] < 1 or out.shape[2] < 1:
        raise DimensionError("conv_transpose2d: padding removes the whole output")
    out = np.ascontiguousarray(out)
    inputs = [x, w]
    if b is not None:
        b = _lift(b, x)
        out += b.data
        inputs.append(b)

    def back(g):
        gfull = np.zeros((B, hf, wf, cout), dtype=x.dtype)
        gfull[:, pad:hf - pad, pad:wf - pad, :] = g
        gx = np.zeros((B * H * W, cin), dtype=x.dtype)
        gw = np.zeros_like(w.data)
        for p in range(k):
            for q in range(k):
                gs = gfull[:, p:p + stride * (H - 1) + 1:stride, q:q + stride * (W - 1) + 1:stride, :]
                gs = gs.reshape(-1, cout)
                gx += gs @ wt[p, q].T
                gw[:, :, p, q] = x2.T @ gs
        grads = [gx.reshape(x.shape), gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return grads

    return record("conv_transpose2d", out, inputs, back)


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Channels-first convolution: ``x[B, Cin, H, W]``, ``w[Cout, Cin, k, k]``."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects a 4-D input, got {x.shape}")
    out = conv2d_nhwc(transpose(x, (0, 2, 3, 1)), w, b, stride=stride, pad=pad)
    return transpose(out, (0, 3, 1, 2))


def conv_transpose2d(x, w, b=None, stride: int = 2, pad: int = 0, output_padding: int = 0) -> Tensor:
    """Channels-first transposed convolution: ``x[B, Cin, H, W]``, ``w[Cin, Cout, k, k]``."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"conv_transpose2d expects a 4-D input, got {x.shape}")
    out = conv_transpose2d_nhwc(
        transpose(x, (0, 2, 3, 1)), w, b, stride=stride, pad=pad, output_padding=output_padding
    )
    return transpose(out, (0, 3, 1, 2))


@differentiable("pixel_shuffle")
def pixel_shuffle(x, r: int) -> Tensor:
    """Rearrange ``[B, C*r*r, H, W]`` into ``[B, C, H*r, W*r]``."""
    x = as_tensor(x)
    B, crr, H, W = x.shape
    if crr % (r * r):
        raise DimensionError(f"pixel_shuffle: {crr} channels not divisible by r^2={r * r}")
    c = crr // (r * r)
    out = x.data.reshape(B, c, r, r, H, W).transpose(0, 1, 4, 2, 5, 3).reshape(B, c, H * r, W * r)
    return record("pixel_shuffle", out, (x,), lambda g: (pixel_unshuffle(g, r),))


def pixel_unshuffle(x: np.ndarray, r: int) -> np.ndarray:
    """Inverse rearrangement of :func:`pixel_shuffle` on a plain array."""
    B, c, hr, wr = x.shape
    if hr % r or wr % r:
        raise DimensionError(f"pixel_unshuffle: {hr}x{wr} not divisible by r={r}")
    H, W = hr // r, wr // r
    return x.reshape(B, c, H, r, W, r).transpose(0, 1, 3, 5, 2, 4).reshape(B, c * r * r, H, W)


def ensure_finite(x: Tensor, what: str) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError(f"non-finite values in {what}")
    return x


def check_same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes differ, {a.shape} vs {b.shape}")

