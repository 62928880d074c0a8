"""Shifted-window self/cross attention and the Swin encoder/decoder blocks.

Feature maps are ``[frames, H, W, C]``. Encoder windows are
temporal-inclusive by default: one window holds the ``M x M`` patch of
every input frame, ``N * M * M`` tokens in ``(t, y, x)`` row-major order.
Decoder queries are windowed per output frame and attend to the
temporal-inclusive windows of the encoder dictionary.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ops
from .autograd import Tensor
from .errors import ConfigError, DimensionError

MASK_VALUE = -1e9
FUSION_MODES = ("mca", "concat", "add")


@dataclass(frozen=True)
class WindowConfig:
    M: int
    shift: tuple[int, int] = (0, 0)
    include_time: bool = True

    def __post_init__(self):
        if self.M < 1:
            raise ConfigError("window size must be positive")
        if not all(0 <= s < self.M for s in self.shift):
            raise ConfigError(f"shift {self.shift} must lie in [0, {self.M})")


def layer_window(M: int, layer: int, H: int, W: int, include_time: bool = True) -> WindowConfig:
    """Window geometry for sub-layer ``layer`` of a block (odd layers are shifted).

    An axis that fits in a single window is never shifted.
    """
    if layer % 2 == 0:
        return WindowConfig(M, (0, 0), include_time)
    s = M // 2
    return WindowConfig(M, (s if H > M else 0, s if W > M else 0), include_time)


# -- partitioning -----------------------------------------------------------

def _check_divisible(H: int, W: int, M: int) -> None:
    if H % M or W % M:
        raise DimensionError(f"window size {M} must divide feature size {H}x{W}")


def window_partition(x, M: int, include_time: bool = True) -> Tensor:
    """``[N, H, W, C]`` -> ``[nW, N*M*M, C]`` (or ``[N*nW, M*M, C]`` per frame)."""
    N, H, W, C = x.shape
    _check_divisible(H, W, M)
    t = ops.reshape(x, (N, H // M, M, W // M, M, C))
    nW = (H // M) * (W // M)
    if include_time:
        return ops.reshape(ops.transpose(t, (1, 3, 0, 2, 4, 5)), (nW, N * M * M, C))
    return ops.reshape(ops.transpose(t, (0, 1, 3, 2, 4, 5)), (N * nW, M * M, C))


def window_reverse(windows, M: int, N: int, H: int, W: int, include_time: bool = True) -> Tensor:
    """Inverse of :func:`window_partition`."""
    _check_divisible(H, W, M)
    C = windows.shape[-1]
    nW = (H // M) * (W // M)
    expected = (nW, N * M * M, C) if include_time else (N * nW, M * M, C)
    if tuple(windows.shape) != expected:
        raise DimensionError(f"window_reverse: got {windows.shape}, expected {expected}")
    if include_time:
        t = ops.reshape(windows, (H // M, W // M, N, M, M, C))
        t = ops.transpose(t, (2, 0, 3, 1, 4, 5))
    else:
        t = ops.reshape(windows, (N, H // M, W // M, M, M, C))
        t = ops.transpose(t, (0, 1, 3, 2, 4, 5))
    return ops.reshape(t, (N, H, W, C))


def cyclic_shift(x, dy: int, dx: int) -> Tensor:
    """Toroidal roll of ``[N, H, W, C]`` by ``(dy, dx)`` along the spatial axes."""
    if dy == 0 and dx == 0:
        return x
    return ops.roll(x, (dy, dx), axis=(1, 2))


@functools.lru_cache(maxsize=128)
def build_shift_mask(H: int, W: int, M: int, dy: int, dx: int) -> np.ndarray:
    """Additive mask ``[nW, M*M, M*M]`` for windows taken after rolling by ``(-dy, -dx)``.

    Tokens that came from different sides of the wrap seam may not attend to
    each other; those pairs get ``MASK_VALUE``.
    """
    _check_divisible(H, W, M)
    labels = np.zeros((H, W), dtype=np.int64)
    hs = [slice(0, H - M), slice(H - M, H - dy), slice(H - dy, H)] if dy else [slice(0, H)]
    ws = [slice(0, W - M), slice(W - M, W - dx), slice(W - dx, W)] if dx else [slice(0, W)]
    region = 0
    for h in hs:
        for w in ws:
            labels[h, w] = region
            region += 1
    lw = labels.reshape(H // M, M, W // M, M).transpose(0, 2, 1, 3).reshape(-1, M * M)
    mask = np.where(lw[:, :, None] != lw[:, None, :], MASK_VALUE, 0.0)
    mask.setflags(write=False)
    return mask


@functools.lru_cache(maxsize=128)
def relative_position_index(
    M: int, q_times: tuple[float, ...], k_times: tuple[float, ...], step: float, radius: int
) -> np.ndarray:
    """Bias-table row for every (query token, key token) pair.

    Tokens are ordered ``(t, y, x)``; temporal offsets are measured in units
    of ``step`` and clipped to ``[-radius, radius]``.
    """
    ys, xs = np.divmod(np.arange(M * M), M)
    span = 2 * M - 1

    def coords(times):
        t = np.repeat(np.asarray(times, dtype=np.float64), M * M)
        return t, np.tile(ys, len(times)), np.tile(xs, len(times))

    tq, yq, xq = coords(q_times)
    tk, yk, xk = coords(k_times)
    dt = np.rint((tq[:, None] - tk[None, :]) / step).astype(np.int64)
    dt = np.clip(dt, -radius, radius) + radius
    dy = yq[:, None] - yk[None, :] + M - 1
    dx = xq[:, None] - xk[None, :] + M - 1
    idx = (dt * span + dy) * span + dx
    idx.setflags(write=False)
    return idx


def bias_table_rows(M: int, radius: int) -> int:
    return (2 * radius + 1) * (2 * M - 1) ** 2


def gather_bias(table: Tensor, index: np.ndarray) -> Tensor:
    """Look up ``table[rows, heads]`` at ``index[..., Tq, Tk]`` -> ``[..., heads, Tq, Tk]``."""
    heads = table.shape[1]
    b = ops.take(table, index.ravel(), axis=0)
    b = ops.reshape(b, index.shape + (heads,))
    nd = index.ndim
    axes = tuple(range(nd - 2)) + (nd, nd - 2, nd - 1)
    return ops.transpose(b, axes)


# -- attention kernels ------------------------------------------------------

@dataclass
class AttentionWeights:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    rpb: Tensor | None = None

    @classmethod
    def from_params(cls, p: dict, prefix: str = "attn.") -> "AttentionWeights":
        return cls(*(p[prefix + n] for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")),
                   rpb=p.get(prefix + "rpb"))


def _split_heads(t: Tensor, heads: int) -> Tensor:
    *lead, T, C = t.shape
    t = ops.reshape(t, tuple(lead) + (T, heads, C // heads))
    n = len(lead)
    return ops.transpose(t, tuple(range(n)) + (n + 1, n, n + 2))


def _merge_heads(t: Tensor) -> Tensor:
    *lead, h, T, d = t.shape
    n = len(lead)
    t = ops.transpose(t, tuple(range(n)) + (n + 1, n, n + 2))
    return ops.reshape(t, tuple(lead) + (T, h * d))


def project_kv(kv_tokens, weights: AttentionWeights, heads: int) -> tuple[Tensor, Tensor]:
    """Key/value projections split into heads: two ``[..., heads, Tk, d]`` tensors."""
    k = _split_heads(ops.linear(kv_tokens, weights.wk, weights.bk), heads)
    v = _split_heads(ops.linear(kv_tokens, weights.wv, weights.bv), heads)
    return k, v


def multi_head_attention(
    q_tokens,
    kv_tokens,
    weights: AttentionWeights,
    heads: int,
    mask: np.ndarray | None = None,
    bias: Tensor | None = None,
    kv: tuple[Tensor, Tensor] | None = None,
    probs_out: list | None = None,
) -> Tensor:
    """Scaled dot-product attention per head, heads concatenated and projected.

    ``mask`` is an additive array shaped like the token batch without the
    head axis (``[..., Tq, Tk]``); ``bias`` must broadcast against
    ``[..., heads, Tq, Tk]``. Pass precomputed ``kv`` (from
    :func:`project_kv`) to skip the key/value projections.
    """
    C = q_tokens.shape[-1]
    if C % heads:
        raise ConfigError(f"channels {C} not divisible by {heads} heads")
    if kv is None:
        if kv_tokens.shape[-1] != C:
            raise DimensionError(f"query width {C} != key/value width {kv_tokens.shape[-1]}")
        kv = project_kv(kv_tokens, weights, heads)
    k, v = kv
    scale = float((C // heads) ** -0.5)
    q = _split_heads(ops.linear(q_tokens, weights.wq, weights.bq), heads)
    q = ops.mul(q, scale)
    nd = k.ndim
    scores = ops.matmul(q, ops.transpose(k, tuple(range(nd - 2)) + (nd - 1, nd - 2)))
    if bias is not None:
        scores = ops.add(scores, bias)
    if mask is not None:
        m = np.asarray(mask)[..., None, :, :]
        if m.shape[-2:] != scores.shape[-2:]:
            raise DimensionError(f"mask {mask.shape} does not match scores {scores.shape}")
        scores = ops.add(scores, m.astype(scores.dtype))
    attn = ops.softmax(scores, axis=-1)
    if probs_out is not None:
        probs_out.append(attn.data)
    out = _merge_heads(ops.matmul(attn, v))
    return ops.linear(out, weights.wo, weights.bo)


# -- parameter layouts --------------------------------------------------------

def encoder_layer_shapes(C: int, M: int, N: int, heads: int, mlp_ratio: int) -> dict:
    """name -> (shape, init) for one Swin encoder sub-layer."""
    hid = mlp_ratio * C
    return {
        "ln1.g": ((C,), "ones"), "ln1.b": ((C,), "zeros"),
        **_attn_shapes(C, bias_table_rows(M, N - 1), heads),
        "ln2.g": ((C,), "ones"), "ln2.b": ((C,), "zeros"),
        **_mlp_shapes(C, hid),
    }


def decoder_layer_shapes(C: int, M: int, N: int, heads: int, mlp_ratio: int, fusion: str = "mca") -> dict:
    """name -> (shape, init) for one decoder sub-layer with the given fusion mode."""
    hid = mlp_ratio * C
    if fusion == "mca":
        fuse = {"ln_q.g": ((C,), "ones"), "ln_q.b": ((C,), "zeros"),
                "ln_kv.g": ((C,), "ones"), "ln_kv.b": ((C,), "zeros"),
                **_attn_shapes(C, bias_table_rows(M, 2 * (N - 1)), heads)}
    elif fusion == "concat":
        fuse = {"ln_q.g": ((C,), "ones"), "ln_q.b": ((C,), "zeros"),
                "ln_kv.g": ((C,), "ones"), "ln_kv.b": ((C,), "zeros"),
                "fuse.w": ((2 * C, C), "zero_exit"), "fuse.b": ((C,), "zeros")}
    elif fusion == "add":
        fuse = {"ln_kv.g": ((C,), "ones"), "ln_kv.b": ((C,), "zeros"),
                "fuse.w": ((C, C), "identity"), "fuse.b": ((C,), "zeros")}
    else:
        raise ConfigError(f"unknown fusion mode {fusion!r}; expected one of {FUSION_MODES}")
    return {**fuse, "ln2.g": ((C,), "ones"), "ln2.b": ((C,), "zeros"), **_mlp_shapes(C, hid)}


def _attn_shapes(C: int, table_rows: int, heads: int) -> dict:
    return {
        "attn.wq": ((C, C), "trunc"), "attn.bq": ((C,), "zeros"),
        "attn.wk": ((C, C), "trunc"), "attn.bk": ((C,), "zeros"),
        "attn.wv": ((C, C), "trunc"), "attn.bv": ((C,), "zeros"),
        "attn.wo": ((C, C), "zero_exit"), "attn.bo": ((C,), "zeros"),
        "attn.rpb": ((table_rows, heads), "trunc"),
    }


def _mlp_shapes(C: int, hid: int) -> dict:
    return {
        "mlp.w1": ((C, hid), "trunc"), "mlp.b1": ((hid,), "zeros"),
        "mlp.w2": ((hid, C), "zero_exit"), "mlp.b2": ((C,), "zeros"),
    }


# -- blocks -------------------------------------------------------------------

def _mlp_sublayer(x: Tensor, p: dict) -> Tensor:
    h = ops.layer_norm(x, p["ln2.g"], p["ln2.b"])
    return ops.add(x, ops.mlp(h, p["mlp.w1"], p["mlp.b1"], p["mlp.w2"], p["mlp.b2"]))


def _table_radius(table: Tensor, M: int) -> int:
    return (table.shape[0] // (2 * M - 1) ** 2 - 1) // 2


def swin_encoder_layer(x, p: dict, heads: int, win: WindowConfig, probs_out: list | None = None) -> Tensor:
    """One residual W-MSA (or SW-MSA when ``win.shift`` is set) + MLP layer."""
    N, H, W, C = x.shape
    M = win.M
    dy, dx = win.shift
    h = ops.layer_norm(x, p["ln1.g"], p["ln1.b"])
    h = cyclic_shift(h, -dy, -dx)
    windows = window_partition(h, M, win.include_time)
    frames = N if win.include_time else 1
    mask = None
    if dy or dx:
        mask = build_shift_mask(H, W, M, dy, dx)
        mask = np.tile(mask, (1, frames, frames)) if win.include_time else np.tile(mask, (N, 1, 1))
    weights = AttentionWeights.from_params(p)
    bias = None
    if weights.rpb is not None:
        times = tuple(float(t) for t in range(frames))
        idx = relative_position_index(M, times, times, 1.0, _table_radius(weights.rpb, M))
        bias = gather_bias(weights.rpb, idx)
    a = multi_head_attention(windows, windows, weights, heads, mask=mask, bias=bias, probs_out=probs_out)
    a = window_reverse(a, M, N, H, W, win.include_time)
    a = cyclic_shift(a, dy, dx)
    return _mlp_sublayer(ops.add(x, a), p)


def swin_encoder_block(x, layers: Sequence[dict], heads: int, M: int, include_time: bool = True) -> Tensor:
    """W-MSA layer followed by SW-MSA layer; shape preserved."""
    _, H, W, _ = x.shape
    for i, p in enumerate(layers):
        x = swin_encoder_layer(x, p, heads, layer_window(M, i, H, W, include_time))
    return x


def default_query_times(n_queries: int, n_dict: int) -> tuple[float, ...]:
    """Evenly spread query times over the dictionary's ``[0, n_dict - 1]`` span."""
    if n_queries == 1:
        return (0.0,)
    return tuple(float(j) * (n_dict - 1) / (n_queries - 1) for j in range(n_queries))


def _cross_attention_sublayer(q, dict_, p, heads, win, query_times, reuse_kv, probs_out):
    F, H, W, C = q.shape
    N = dict_.shape[0]
    M = win.M
    dy, dx = win.shift
    nW = (H // M) * (W // M)
    hq = cyclic_shift(ops.layer_norm(q, p["ln_q.g"], p["ln_q.b"]), -dy, -dx)
    hk = cyclic_shift(ops.layer_norm(dict_, p["ln_kv.g"], p["ln_kv.b"]), -dy, -dx)
    qw = ops.reshape(window_partition(hq, M, include_time=False), (F, nW, M * M, C))
    kvw = window_partition(hk, M, include_time=True)
    mask = None
    if dy or dx:
        mask = np.tile(build_shift_mask(H, W, M, dy, dx), (1, 1, N))
    weights = AttentionWeights.from_params(p)
    bias = None
    if weights.rpb is not None:
        k_times = tuple(float(t) for t in range(N))
        radius = _table_radius(weights.rpb, M)
        idx = np.stack([relative_position_index(M, (t,), k_times, 0.5, radius) for t in query_times])
        bias = gather_bias(weights.rpb, idx)  # [F, heads, M*M, N*M*M]
        bias = ops.reshape(bias, (F, 1) + bias.shape[1:])
    if reuse_kv:
        kv = project_kv(kvw, weights, heads)
        a = multi_head_attention(qw, None, weights, heads, mask=mask, bias=bias, kv=kv, probs_out=probs_out)
    else:
        outs, probs = [], []
        for f in range(F):
            fb = None if bias is None else ops.getitem(bias, slice(f, f + 1))
            outs.append(multi_head_attention(
                ops.getitem(qw, slice(f, f + 1)), kvw, weights, heads, mask=mask, bias=fb,
                probs_out=probs if probs_out is not None else None,
            ))
        a = ops.concat(outs, axis=0)
        if probs_out is not None:
            probs_out.append(np.concatenate(probs, axis=0))
    a = window_reverse(ops.reshape(a, (F * nW, M * M, C)), M, F, H, W, include_time=False)
    return ops.add(q, cyclic_shift(a, dy, dx))


def fuse_variant(q, dict_, p: dict, mode: str, heads: int = 2, win: WindowConfig | None = None,
                 query_times=None, reuse_kv: bool = True, probs_out: list | None = None) -> Tensor:
    """First half of a decoder layer: merge dictionary information into ``q``.

    ``mca`` uses windowed cross-attention; ``concat`` and ``add`` use the
    frame-averaged dictionary with a per-token linear map.
    """
    if mode not in FUSION_MODES:
        raise ConfigError(f"unknown fusion mode {mode!r}; expected one of {FUSION_MODES}")
    if q.shape[1:3] != dict_.shape[1:3] or q.shape[-1] != dict_.shape[-1]:
        raise DimensionError(f"query {q.shape} and dictionary {dict_.shape} differ in size")
    if mode == "mca":
        if win is None:
            raise ConfigError("mca fusion needs a window configuration")
        if query_times is None:
            query_times = default_query_times(q.shape[0], dict_.shape[0])
        return _cross_attention_sublayer(q, dict_, p, heads, win, tuple(query_times), reuse_kv, probs_out)
    F = q.shape[0]
    pooled = ops.mean(ops.layer_norm(dict_, p["ln_kv.g"], p["ln_kv.b"]), axis=0, keepdims=True)
    if mode == "concat":
        hq = ops.layer_norm(q, p["ln_q.g"], p["ln_q.b"])
        z = ops.concat([hq, ops.take(pooled, np.zeros(F, dtype=np.intp), axis=0)], axis=-1)
        return ops.add(q, ops.linear(z, p["fuse.w"], p["fuse.b"]))
    if mode == "add":
        return ops.add(q, ops.linear(pooled, p["fuse.w"], p["fuse.b"]))
    raise ConfigError(f"unknown fusion mode {mode!r}; expected one of {FUSION_MODES}")


def swin_decoder_layer(q, dict_, p: dict, heads: int, win: WindowConfig, fusion: str = "mca",
                       query_times=None, reuse_kv: bool = True, probs_out: list | None = None) -> Tensor:
    x = fuse_variant(q, dict_, p, fusion, heads=heads, win=win, query_times=query_times,
                     reuse_kv=reuse_kv, probs_out=probs_out)
    return _mlp_sublayer(x, p)


def swin_decoder_block(q, dict_, layers: Sequence[dict], heads: int, M: int, fusion: str = "mca",
                       query_times=None, reuse_kv: bool = True, probs_out: list | None = None) -> Tensor:
    """W-MCA layer then SW-MCA layer; every output frame queries the same dictionary."""
    _, H, W, _ = q.shape
    for i, p in enumerate(layers):
        q = swin_decoder_layer(q, dict_, p, heads, layer_window(M, i, H, W), fusion=fusion,
                               query_times=query_times, reuse_kv=reuse_kv, probs_out=probs_out)
    return q
