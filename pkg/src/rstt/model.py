"""The RSTT network: 4 low-res frames in, 7 frames at 4x resolution out.

Pipeline: reflect-pad -> 3x3 feature conv -> four Swin encoder stages
(stride-2 conv between them) -> query builder -> four Swin decoder stages
(2x2 transposed conv between them) -> conv + pixel shuffle -> add the
trilinear warm start -> crop.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import ops
from .attention import (
    FUSION_MODES,
    decoder_layer_shapes,
    encoder_layer_shapes,
    swin_decoder_block,
    swin_encoder_block,
)
from .autograd import Tensor, as_tensor, default_dtype
from .errors import ConfigError, ContractError, DimensionError, NonFiniteError
from .resample import trilinear_resize

N_STAGES = 4
N_OUT = 7
SCALE = 4
RECON_RESBLOCKS = 10
PRESETS = {"S": 2, "M": 3, "L": 4}


@dataclass(frozen=True)
class ModelConfig:
    C: int = 96
    M: int = 4
    N: int = 4
    blocks_per_stage: int = 2
    heads: int = 2
    mlp_ratio: int = 4
    fusion: str = "mca"
    recon_block: bool = False
    pad_multiple: int = 32
    include_time: bool = True

    def __post_init__(self):
        if self.N != 4:
            raise ConfigError("the network takes exactly 4 input frames (N=4)")
        if self.C < 1 or self.heads < 1 or self.C % self.heads:
            raise ConfigError(f"C={self.C} must be a positive multiple of heads={self.heads}")
        if self.blocks_per_stage < 1:
            raise ConfigError("blocks_per_stage must be >= 1")
        if self.M < 1 or self.mlp_ratio < 1:
            raise ConfigError("window size and mlp ratio must be positive")
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {self.fusion!r}; expected one of {FUSION_MODES}")
        if self.pad_multiple % (2 ** (N_STAGES - 1) * self.M):
            raise ConfigError(
                f"pad_multiple={self.pad_multiple} must be a multiple of {2 ** (N_STAGES - 1)}*M"
            )

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        try:
            blocks = PRESETS[name.upper()]
        except KeyError:
            raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None
        return cls(blocks_per_stage=blocks, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class FeatureStages:
    """Pre-downsampling encoder outputs ``T_0..T_3``; the last one is also ``E_3``."""

    T: list[Tensor] = field(default_factory=list)

    @property
    def E3(self) -> Tensor:
        return self.T[-1]


# -- parameter declaration ----------------------------------------------------

def param_shapes(config: ModelConfig) -> dict[str, tuple[tuple[int, ...], str]]:
    """Every weight tensor the model declares: name -> (shape, init kind)."""
    C, M, N = config.C, config.M, config.N
    shapes: dict[str, tuple[tuple[int, ...], str]] = {
        "extract.w": ((C, 3, 3, 3), "conv"),
        "extract.b": ((C,), "zeros"),
    }
    enc = encoder_layer_shapes(C, M, N, config.heads, config.mlp_ratio)
    dec = decoder_layer_shapes(C, M, N, config.heads, config.mlp_ratio, config.fusion)
    for k in range(N_STAGES):
        for b in range(config.blocks_per_stage):
            for layer in range(2):
                for name, spec in enc.items():
                    shapes[f"enc{k}.{b}.{layer}.{name}"] = spec
        if k < N_STAGES - 1:
            shapes[f"down{k}.w"] = ((C, C, 3, 3), "conv")
            shapes[f"down{k}.b"] = ((C,), "zeros")
    for k in reversed(range(N_STAGES)):
        for b in range(config.blocks_per_stage):
            for layer in range(2):
                for name, spec in dec.items():
                    shapes[f"dec{k}.{b}.{layer}.{name}"] = spec
        if k > 0:
            shapes[f"up{k}.w"] = ((C, C, 2, 2), "conv")
            shapes[f"up{k}.b"] = ((C,), "zeros")
    if config.recon_block:
        for i in range(RECON_RESBLOCKS):
            shapes[f"recon.{i}.conv1.w"] = ((C, C, 3, 3), "conv")
            shapes[f"recon.{i}.conv1.b"] = ((C,), "zeros")
            shapes[f"recon.{i}.conv2.w"] = ((C, C, 3, 3), "zero_exit")
            shapes[f"recon.{i}.conv2.b"] = ((C,), "zeros")
    shapes["final.w"] = ((3 * SCALE * SCALE, C, 3, 3), "zero_exit")
    shapes["final.b"] = ((3 * SCALE * SCALE,), "zeros")
    return shapes


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(config: ModelConfig, seed: int = 0, dtype=None, zero_exits: bool = True,
                std: float = 0.02) -> dict[str, Tensor]:
    """Fresh weights. Residual exits and the final conv start at zero unless
    ``zero_exits`` is off (grad checks want every path active)."""
    dtype = np.dtype(dtype or default_dtype())
    rng = np.random.default_rng(seed)
    params = {}
    for name, (shape, kind) in param_shapes(config).items():
        if kind == "ones":
            arr = np.ones(shape)
        elif kind == "zeros":
            arr = np.zeros(shape)
        elif kind == "identity":
            arr = np.eye(shape[0])
        elif kind == "conv":
            bound = 1.0 / math.sqrt(shape[1] * shape[2] * shape[3])
            arr = rng.uniform(-bound, bound, shape)
        elif kind == "trunc" or (kind == "zero_exit" and not zero_exits):
            arr = _trunc_normal(rng, shape, std)
        elif kind == "zero_exit":
            arr = np.zeros(shape)
        else:  # pragma: no cover - declaration bug
            raise AssertionError(kind)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return params


def count_params(config: ModelConfig) -> int:
    """Closed-form scalar weight count."""
    C, M, N, h, r = config.C, config.M, config.N, config.heads, config.mlp_ratio
    span2 = (2 * M - 1) ** 2
    mlp = 2 * C + C * r * C + r * C + r * C * C + C  # ln2 + two linears
    attn = 4 * (C * C + C)
    enc_layer = 2 * C + attn + (2 * N - 1) * span2 * h + mlp
    if config.fusion == "mca":
        dec_layer = 4 * C + attn + (4 * N - 3) * span2 * h + mlp
    elif config.fusion == "concat":
        dec_layer = 4 * C + 2 * C * C + C + mlp
    else:
        dec_layer = 2 * C + C * C + C + mlp
    layers = N_STAGES * config.blocks_per_stage * 2
    total = 3 * C * 9 + C
    total += layers * (enc_layer + dec_layer)
    total += (N_STAGES - 1) * (9 * C * C + C)  # stride-2 convs
    total += (N_STAGES - 1) * (4 * C * C + C)  # transposed convs
    if config.recon_block:
        total += RECON_RESBLOCKS * 2 * (9 * C * C + C)
    out_ch = 3 * SCALE * SCALE
    total += 9 * C * out_ch + out_ch
    return total


def count_macs(config: ModelConfig, H: int, W: int) -> int:
    """Multiply-accumulates of one forward pass at padded input size ``H x W``."""
    C, M, N, r = config.C, config.M, config.N, config.mlp_ratio
    total = N * H * W * C * 27
    for k in range(N_STAGES):
        hk, wk = H >> k, W >> k
        n_tok, m_tok = N * hk * wk, N_OUT * hk * wk
        enc = n_tok * (4 * C * C + 2 * N * M * M * C + 2 * r * C * C)
        if config.fusion == "mca":
            fuse = m_tok * (2 * C * C + 2 * N * M * M * C) + n_tok * 2 * C * C
        elif config.fusion == "concat":
            fuse = m_tok * 2 * C * C
        else:
            fuse = hk * wk * C * C
        dec = fuse + m_tok * 2 * r * C * C
        total += config.blocks_per_stage * 2 * (enc + dec)
        if k < N_STAGES - 1:
            total += N * (hk // 2) * (wk // 2) * 9 * C * C
        if k > 0:
            total += N_OUT * hk * wk * 4 * C * C
    if config.recon_block:
        total += RECON_RESBLOCKS * 2 * N_OUT * H * W * 9 * C * C
    total += N_OUT * H * W * 9 * C * 3 * SCALE * SCALE
    return total


# -- query builder --------------------------------------------------------------

def build_query(E3) -> Tensor:
    """Seven queries from four deepest features: anchors at even slots,
    neighbour means in between."""
    E3 = as_tensor(E3)
    if E3.shape[0] != 4:
        raise DimensionError(f"build_query expects 4 frames, got {E3.shape[0]}")
    means = ops.mul(ops.add(ops.getitem(E3, slice(0, 3)), ops.getitem(E3, slice(1, 4))), 0.5)
    both = ops.concat([E3, means], axis=0)
    return ops.take(both, [0, 4, 1, 5, 2, 6, 3], axis=0)


def arbitrary_fractions(n: int, fractions=None) -> tuple[float, ...]:
    if fractions is None:
        if n < 2:
            raise ContractError(f"subdivisions n must be >= 2, got {n}")
        return tuple(i / n for i in range(1, n))
    fractions = tuple(float(f) for f in fractions)
    if not fractions or any(not 0.0 < f < 1.0 for f in fractions):
        raise ContractError(f"fractions must lie strictly inside (0, 1): {fractions}")
    return fractions


def build_query_arbitrary(E3, n: int = 2, fractions=None) -> Tensor:
    """Queries at arbitrary times between neighbouring anchors.

    Each gap gets one blended query ``(1 - f) * left + f * right`` per
    fraction ``f`` (default ``i / n`` for ``i = 1 .. n-1``); anchors are kept
    as is. ``n = 2`` reproduces :func:`build_query`.
    """
    E3 = as_tensor(E3)
    fr = arbitrary_fractions(n, fractions)
    frames = []
    for g in range(E3.shape[0]):
        left = ops.getitem(E3, slice(g, g + 1))
        frames.append(left)
        if g == E3.shape[0] - 1:
            break
        right = ops.getitem(E3, slice(g + 1, g + 2))
        for f in fr:
            if f == 0.5:
                frames.append(ops.mul(ops.add(left, right), 0.5))
            else:
                frames.append(ops.add(ops.mul(left, 1.0 - f), ops.mul(right, f)))
    return ops.concat(frames, axis=0)


def arbitrary_query_times(n_anchor: int = 4, n: int = 2, fractions=None) -> tuple[float, ...]:
    """Times (in anchor-frame units) of the queries built by :func:`build_query_arbitrary`."""
    fr = arbitrary_fractions(n, fractions)
    times = []
    for g in range(n_anchor):
        times.append(float(g))
        if g < n_anchor - 1:
            times.extend(g + f for f in fr)
    return tuple(times)


# -- network ------------------------------------------------------------------------

class RSTT:
    """Model weights plus the forward pass. Parameters live in ``self.params``."""

    def __init__(self, config: ModelConfig | None = None, params: dict[str, Tensor] | None = None,
                 seed: int = 0, dtype=None):
        self.config = config or ModelConfig()
        self.params = params if params is not None else init_params(self.config, seed, dtype)
        missing = set(param_shapes(self.config)) - set(self.params)
        if missing:
            raise ConfigError(f"missing parameters: {sorted(missing)[:5]}")

    @property
    def dtype(self) -> np.dtype:
        return self.params["final.w"].dtype

    def _layers(self, prefix: str) -> list[dict]:
        out = []
        for layer in range(2):
            head = f"{prefix}.{layer}."
            out.append({k[len(head):]: v for k, v in self.params.items() if k.startswith(head)})
        return out

    def padded_size(self, H: int, W: int) -> tuple[int, int]:
        pm = self.config.pad_multiple
        return -(-H // pm) * pm, -(-W // pm) * pm

    def extract_features(self, quad) -> Tensor:
        """``[4, 3, H, W]`` frames -> ``[4, H, W, C]`` features (one shared 3x3 conv)."""
        quad = as_tensor(quad, dtype=self.dtype)
        x = ops.transpose(quad, (0, 2, 3, 1))
        return ops.conv2d_nhwc(x, self.params["extract.w"], self.params["extract.b"], stride=1, pad=1)

    def encode(self, feats) -> FeatureStages:
        cfg = self.config
        stages = FeatureStages()
        x = feats
        for k in range(N_STAGES):
            for b in range(cfg.blocks_per_stage):
                x = swin_encoder_block(x, self._layers(f"enc{k}.{b}"), cfg.heads, cfg.M, cfg.include_time)
            stages.T.append(x)
            if k < N_STAGES - 1:
                x = ops.conv2d_nhwc(x, self.params[f"down{k}.w"], self.params[f"down{k}.b"], stride=2, pad=1)
        return stages

    def decode(self, stages: FeatureStages, Q, query_times=None, reuse_kv: bool = True,
               trace: dict | None = None) -> Tensor:
        cfg = self.config
        x = as_tensor(Q)
        if x.shape[1:3] != stages.E3.shape[1:3]:
            raise DimensionError(f"query {x.shape} must match the deepest stage {stages.E3.shape}")
        for k in reversed(range(N_STAGES)):
            for b in range(cfg.blocks_per_stage):
                probs = [] if trace is not None else None
                x = swin_decoder_block(x, stages.T[k], self._layers(f"dec{k}.{b}"), cfg.heads, cfg.M,
                                       fusion=cfg.fusion, query_times=query_times, reuse_kv=reuse_kv,
                                       probs_out=probs)
                if trace is not None:
                    trace[(k, b)] = probs
            if k > 0:
                x = ops.conv_transpose2d_nhwc(x, self.params[f"up{k}.w"], self.params[f"up{k}.b"], stride=2)
        return x

    def reconstruct(self, D0) -> Tensor:
        """``[F, H, W, C]`` -> residual frames ``[F, 3, 4H, 4W]``."""
        p = self.params
        x = D0
        if self.config.recon_block:
            for i in range(RECON_RESBLOCKS):
                h = ops.relu(ops.conv2d_nhwc(x, p[f"recon.{i}.conv1.w"], p[f"recon.{i}.conv1.b"], pad=1))
                x = ops.add(x, ops.conv2d_nhwc(h, p[f"recon.{i}.conv2.w"], p[f"recon.{i}.conv2.b"], pad=1))
        y = ops.conv2d_nhwc(x, p["final.w"], p["final.b"], pad=1)
        return ops.pixel_shuffle(ops.transpose(y, (0, 3, 1, 2)), SCALE)

    def forward(self, quad, Q_builder=None, query_times=None, reuse_kv: bool = True,
                trace: dict | None = None) -> Tensor:
        """Four frames ``[4, 3, H, W]`` in [0, 1] -> seven frames ``[7, 3, 4H, 4W]``.

        ``Q_builder`` maps the deepest features to the query stack (default
        :func:`build_query`); pass ``query_times`` alongside a custom builder.
        """
        quad = as_tensor(quad, dtype=self.dtype)
        if quad.ndim != 4 or quad.shape[:2] != (4, 3):
            raise DimensionError(f"expected 4 RGB frames [4, 3, H, W], got {quad.shape}")
        _, _, H, W = quad.shape
        Hp, Wp = self.padded_size(H, W)
        x = ops.reflect_pad(quad, (Hp - H, Wp - W), (2, 3))
        stages = self.encode(self.extract_features(x))
        Q = (Q_builder or build_query)(stages.E3)
        D0 = self.decode(stages, Q, query_times=query_times, reuse_kv=reuse_kv, trace=trace)
        res = self.reconstruct(D0)
        if (Hp, Wp) != (H, W):
            res = ops.getitem(res, (slice(None), slice(None), slice(0, SCALE * H), slice(0, SCALE * W)))
        warm = trilinear_resize(quad, res.shape[0], SCALE * H, SCALE * W)
        out = ops.add(warm, res)
        if not np.all(np.isfinite(out.data)):
            raise NonFiniteError("non-finite values in the network output")
        return out

    __call__ = forward

    def with_config(self, **changes) -> "RSTT":
        return RSTT(replace(self.config, **changes), self.params)


def dump_attention(model: RSTT, quad, stage: int = 0, block: int = -1, layer: int = 0) -> np.ndarray:
    """Cross-attention weights of one decoder layer: ``[7, nW, heads, M*M, N*M*M]``.

    Defaults to the unshifted layer of the last block in the finest stage.
    Each row (one query pixel) sums to one over the dictionary tokens.
    """
    if model.config.fusion != "mca":
        raise ConfigError("attention maps exist only for the mca fusion mode")
    if not 0 <= stage < N_STAGES:
        raise ConfigError(f"stage must be in [0, {N_STAGES}), got {stage}")
    nb = model.config.blocks_per_stage
    if not -nb <= block < nb or layer not in (0, 1):
        raise ConfigError(f"block {block} / layer {layer} out of range")
    trace: dict = {}
    model.forward(quad, trace=trace)
    return trace[(stage, block % nb)][layer]
