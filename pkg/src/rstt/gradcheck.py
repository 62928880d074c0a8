"""Finite-difference gradient verification.

:func:`grad_check` compares tape gradients with central differences in
64-bit mode. :data:`OP_CASES` holds three randomized cases for every
registered differentiable op; :func:`run_all` runs those plus composite
cases (attention, Swin blocks, the reduced end-to-end model).
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .attention import (
    AttentionWeights,
    decoder_layer_shapes,
    encoder_layer_shapes,
    multi_head_attention,
    swin_decoder_block,
    swin_encoder_block,
)
from .autograd import Tape, Tensor, backward, default_dtype, finite_checks, precision
from .errors import ContractError
from .model import RSTT, ModelConfig, param_shapes
from .ops import DIFFERENTIABLE_OPS
from .resample import trilinear_resize
from .train import charbonnier

OP_TOL = 1e-5
MODEL_TOL = 1e-4


def grad_check(f: Callable[..., Tensor], inputs, h: float = 1e-4, n_samples: int = 24,
               seed: int = 0) -> float:
    """Max over sampled coordinates of ``|analytic - numeric| / max(1, |analytic|)``.

    ``f`` may return any shape; it is reduced to a scalar through a fixed
    random projection. Only inputs with ``requires_grad`` are perturbed.
    """
    if np.dtype(default_dtype()) != np.float64:
        raise ContractError("grad_check must run inside precision(np.float64)")
    inputs = list(inputs)
    if any(t.dtype != np.float64 for t in inputs):
        raise ContractError("grad_check inputs must be float64")
    rng = np.random.default_rng(seed)
    with finite_checks(True):
        out = f(*inputs)
    R = rng.standard_normal(out.shape)

    def objective() -> float:
        return float(np.sum(f(*inputs).data * R))

    for t in inputs:
        t.zero_grad()
    with finite_checks(True), Tape() as tape:
        out = f(*inputs)
        loss = ops.sum(ops.mul(out, R))
    _maybe_sabotage(tape)
    backward(loss, tape)

    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        k = min(n_samples, flat.size)
        for i in rng.choice(flat.size, size=k, replace=False):
            orig = flat[i]
            flat[i] = orig + h
            fp = objective()
            flat[i] = orig - h
            fm = objective()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst


# -- sabotage hook (used to prove the harness catches broken backward rules) --

_SABOTAGE: list[str] = []


@contextlib.contextmanager
def sabotage(op_name: str):
    """Scale the gradient every ``op_name`` node passes back by 1.5."""
    if op_name not in DIFFERENTIABLE_OPS:
        raise ContractError(f"unknown op {op_name!r}")
    _SABOTAGE.append(op_name)
    try:
        yield
    finally:
        _SABOTAGE.remove(op_name)


def _maybe_sabotage(tape: Tape) -> None:
    if not _SABOTAGE:
        return
    for node in tape.nodes:
        if node.name in _SABOTAGE:
            inner = node.backward
            node.backward = lambda g, inner=inner: [None if x is None else 1.5 * x for x in inner(g)]


# -- per-op cases ---------------------------------------------------------------

Case = Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[Tensor]]]
OP_CASES: dict[str, list[Case]] = {}


def _leaf(rng, shape, lo=None, hi=None) -> Tensor:
    if lo is None:
        return Tensor(rng.standard_normal(shape), requires_grad=True)
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def _away_from_zero(rng, shape, margin=0.2) -> Tensor:
    x = rng.standard_normal(shape)
    x = np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)
    return Tensor(x, requires_grad=True)


def case(op: str):
    def deco(fn):
        OP_CASES.setdefault(op, []).append(fn)
        return fn
    return deco


for _shape_a, _shape_b in (((3, 4), (3, 4)), ((2, 3, 4), (4,)), ((5,), (1,))):
    for _name, _fn in (("add", ops.add), ("sub", ops.sub), ("mul", ops.mul)):
        case(_name)(lambda rng, sa=_shape_a, sb=_shape_b, fn=_fn: (fn, [_leaf(rng, sa), _leaf(rng, sb)]))
    case("div")(lambda rng, sa=_shape_a, sb=_shape_b: (ops.div, [_leaf(rng, sa), _leaf(rng, sb, 0.5, 2.0)]))

for _shape in ((4,), (2, 3), (2, 3, 4)):
    case("neg")(lambda rng, s=_shape: (ops.neg, [_leaf(rng, s)]))
    case("exp")(lambda rng, s=_shape: (ops.exp, [_leaf(rng, s)]))
    case("sqrt")(lambda rng, s=_shape: (ops.sqrt, [_leaf(rng, s, 0.3, 3.0)]))
    case("relu")(lambda rng, s=_shape: (ops.relu, [_away_from_zero(rng, s)]))
    case("gelu")(lambda rng, s=_shape: (ops.gelu, [_leaf(rng, s)]))
    case("softmax")(lambda rng, s=_shape: (lambda x: ops.softmax(x, axis=-1), [_leaf(rng, s)]))

for _p in (2.0, 3.0, 0.5):
    case("power")(lambda rng, p=_p: (lambda x: ops.power(x, p), [_leaf(rng, (3, 4), 0.3, 2.0)]))

for _axis in (None, 0, (1, 2)):
    case("sum")(lambda rng, a=_axis: (lambda x: ops.sum(x, axis=a), [_leaf(rng, (2, 3, 4))]))
    case("mean")(lambda rng, a=_axis: (lambda x: ops.mean(x, axis=a, keepdims=True), [_leaf(rng, (2, 3, 4))]))

case("reshape")(lambda rng: (lambda x: ops.reshape(x, (6, 4)), [_leaf(rng, (2, 3, 4))]))
case("reshape")(lambda rng: (lambda x: ops.reshape(x, (3, 1, 2)), [_leaf(rng, (6,))]))
case("reshape")(lambda rng: (lambda x: ops.reshape(x, (-1,)), [_leaf(rng, (2, 2, 5))]))
case("transpose")(lambda rng: (lambda x: ops.transpose(x, (1, 0)), [_leaf(rng, (3, 5))]))
case("transpose")(lambda rng: (lambda x: ops.transpose(x, (2, 0, 1)), [_leaf(rng, (2, 3, 4))]))
case("transpose")(lambda rng: (lambda x: ops.transpose(x, (0, 3, 1, 2)), [_leaf(rng, (2, 2, 3, 2))]))
case("getitem")(lambda rng: (lambda x: ops.getitem(x, (slice(1, 3), 2)), [_leaf(rng, (4, 5))]))
case("getitem")(lambda rng: (lambda x: ops.getitem(x, (Ellipsis, slice(None, None, 2))), [_leaf(rng, (2, 3, 6))]))
case("getitem")(lambda rng: (lambda x: ops.getitem(x, np.array([0, 2, 2, 1])), [_leaf(rng, (3, 4))]))
case("take")(lambda rng: (lambda x: ops.take(x, [0, 0, 3, 1], axis=0), [_leaf(rng, (4, 3))]))
case("take")(lambda rng: (lambda x: ops.take(x, [[1, 2], [2, 2]], axis=1), [_leaf(rng, (2, 3, 2))]))
case("take")(lambda rng: (lambda x: ops.take(x, [4, 3, 2, 3], axis=-1), [_leaf(rng, (2, 5))]))
case("concat")(lambda rng: (lambda a, b: ops.concat([a, b], axis=0), [_leaf(rng, (2, 3)), _leaf(rng, (4, 3))]))
case("concat")(lambda rng: (lambda a, b: ops.concat([a, b, a], axis=-1), [_leaf(rng, (2, 3)), _leaf(rng, (2, 1))]))
case("concat")(lambda rng: (lambda a, b: ops.concat([a, b], axis=1), [_leaf(rng, (2, 2, 2)), _leaf(rng, (2, 3, 2))]))
case("stack")(lambda rng: (lambda a, b: ops.stack([a, b], axis=0), [_leaf(rng, (2, 3)), _leaf(rng, (2, 3))]))
case("stack")(lambda rng: (lambda a, b: ops.stack([a, b, b], axis=1), [_leaf(rng, (3,)), _leaf(rng, (3,))]))
case("stack")(lambda rng: (lambda a, b: ops.stack([b, a], axis=-1), [_leaf(rng, (2, 2)), _leaf(rng, (2, 2))]))
case("roll")(lambda rng: (lambda x: ops.roll(x, 2, axis=0), [_leaf(rng, (5, 2))]))
case("roll")(lambda rng: (lambda x: ops.roll(x, (-1, 2), axis=(1, 2)), [_leaf(rng, (2, 4, 4, 3))]))
case("roll")(lambda rng: (lambda x: ops.roll(x, -3, axis=-1), [_leaf(rng, (3, 7))]))
case("matmul")(lambda rng: (ops.matmul, [_leaf(rng, (4, 5)), _leaf(rng, (5, 2))]))
case("matmul")(lambda rng: (ops.matmul, [_leaf(rng, (2, 3, 4)), _leaf(rng, (4, 2))]))
case("matmul")(lambda rng: (ops.matmul, [_leaf(rng, (2, 1, 3, 4)), _leaf(rng, (3, 4, 2))]))
case("linear")(lambda rng: (ops.linear, [_leaf(rng, (5, 3)), _leaf(rng, (3, 4)), _leaf(rng, (4,))]))
case("linear")(lambda rng: (ops.linear, [_leaf(rng, (2, 3, 4)), _leaf(rng, (4, 2)), _leaf(rng, (2,))]))
case("linear")(lambda rng: (lambda x, w: ops.linear(x, w), [_leaf(rng, (6, 2)), _leaf(rng, (2, 3))]))
for _shape in ((3, 8), (2, 3, 6), (5, 4)):
    case("layer_norm")(lambda rng, s=_shape: (
        ops.layer_norm, [_leaf(rng, s), _leaf(rng, s[-1:]), _leaf(rng, s[-1:])]))
for _B, _cin, _cout, _H, _W, _k, _stride, _pad in ((1, 2, 3, 5, 5, 3, 1, 1), (2, 3, 2, 6, 7, 3, 2, 1),
                                                   (1, 1, 2, 4, 4, 1, 1, 0)):
    case("conv2d")(lambda rng, B=_B, ci=_cin, co=_cout, H=_H, W=_W, k=_k, s=_stride, p=_pad: (
        lambda x, w, b: ops.conv2d_nhwc(x, w, b, stride=s, pad=p),
        [_leaf(rng, (B, H, W, ci)), _leaf(rng, (co, ci, k, k)), _leaf(rng, (co,))]))
for _B, _cin, _cout, _H, _W, _k, _pad in ((1, 2, 3, 3, 3, 2, 0), (2, 3, 2, 2, 4, 3, 1), (1, 2, 2, 3, 2, 4, 1)):
    case("conv_transpose2d")(lambda rng, B=_B, ci=_cin, co=_cout, H=_H, W=_W, k=_k, p=_pad: (
        lambda x, w, b: ops.conv_transpose2d_nhwc(x, w, b, stride=2, pad=p),
        [_leaf(rng, (B, H, W, ci)), _leaf(rng, (ci, co, k, k)), _leaf(rng, (co,))]))
for _shape, _r in (((1, 4, 2, 2), 2), ((2, 9, 2, 1), 3), ((1, 8, 1, 3), 2)):
    case("pixel_shuffle")(lambda rng, s=_shape, r=_r: (lambda x: ops.pixel_shuffle(x, r), [_leaf(rng, s)]))
for _shape, _out in (((4, 2, 3, 3), (7, 12, 12)), ((2, 1, 2, 3), (3, 5, 4)), ((3, 2, 4, 4), (3, 2, 6))):
    case("trilinear_resize")(lambda rng, s=_shape, o=_out: (lambda x: trilinear_resize(x, *o), [_leaf(rng, s)]))


# -- composite cases -------------------------------------------------------------

def _random_layer(rng, shapes: dict) -> dict[str, Tensor]:
    out = {}
    for name, (shape, kind) in shapes.items():
        if kind == "ones":
            arr = 1.0 + 0.1 * rng.standard_normal(shape)
        elif kind == "identity":
            arr = np.eye(shape[0]) + 0.2 * rng.standard_normal(shape)
        else:
            arr = 0.3 * rng.standard_normal(shape)
        out[name] = Tensor(arr, requires_grad=True)
    return out


def _softmax_matmul(rng):
    return (lambda a, b, v: ops.matmul(ops.softmax(ops.matmul(a, b), axis=-1), v),
            [_leaf(rng, (3, 4)), _leaf(rng, (4, 5)), _leaf(rng, (5, 2))])


def _attention(rng):
    C, heads = 8, 2
    p = _random_layer(rng, {k: v for k, v in encoder_layer_shapes(C, 2, 1, heads, 2).items()
                            if k.startswith("attn.") and k != "attn.rpb"})
    names = sorted(p)

    def f(q, kv, *vals):
        w = AttentionWeights.from_params(dict(zip(names, vals)))
        return multi_head_attention(q, kv, w, heads)

    return f, [_leaf(rng, (2, 4, C)), _leaf(rng, (2, 6, C))] + [p[n] for n in names]


def _layer_fn(block, shapes_fn, rng, n_params_layers=2, **kw):
    layers = [_random_layer(rng, shapes_fn()) for _ in range(n_params_layers)]
    names = [sorted(l) for l in layers]
    flat = [l[n] for l, ns in zip(layers, names) for n in ns]

    def rebuild(vals):
        out, i = [], 0
        for ns in names:
            out.append(dict(zip(ns, vals[i:i + len(ns)])))
            i += len(ns)
        return out

    return rebuild, flat


def _encoder_block(rng):
    C, M, N, heads = 8, 2, 4, 2
    rebuild, flat = _layer_fn(None, lambda: encoder_layer_shapes(C, M, N, heads, 2), rng)

    def f(x, *vals):
        return swin_encoder_block(x, rebuild(vals), heads, M)

    return f, [_leaf(rng, (N, 4, 4, C))] + flat


def _decoder_block(rng):
    C, M, N, heads = 8, 2, 4, 2
    rebuild, flat = _layer_fn(None, lambda: decoder_layer_shapes(C, M, N, heads, 2, "mca"), rng)

    def f(q, d, *vals):
        return swin_decoder_block(q, d, rebuild(vals), heads, M)

    return f, [_leaf(rng, (7, 4, 4, C)), _leaf(rng, (N, 4, 4, C))] + flat


def reduced_config() -> ModelConfig:
    return ModelConfig(C=8, M=2, blocks_per_stage=1, pad_multiple=16)


def random_model_params(cfg: ModelConfig, rng) -> dict[str, Tensor]:
    """Variance-preserving random weights with every residual exit active.

    Keeps activations O(1) through the decoder so LayerNorm stays far from
    its ``eps`` regime, where finite differences lose accuracy.
    """
    out = {}
    for name, (shape, kind) in param_shapes(cfg).items():
        if kind == "ones":
            arr = 1.0 + 0.1 * rng.standard_normal(shape)
        elif kind == "identity":
            arr = np.eye(shape[0]) + 0.1 * rng.standard_normal(shape)
        elif len(shape) == 1 or name.endswith("rpb"):
            arr = 0.1 * rng.standard_normal(shape)
        else:
            # 2x2 stride-2 transposed convs feed each output from one tap
            fan = shape[0] if name.startswith("up") else int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            arr = rng.standard_normal(shape) / np.sqrt(fan)
        out[name] = Tensor(arr, requires_grad=True)
    return out


def _end_to_end(rng):
    cfg = reduced_config()
    params = random_model_params(cfg, rng)
    names = sorted(params)
    quad = Tensor(rng.uniform(0, 1, (4, 3, 16, 16)), requires_grad=True)

    def f(x, *vals):
        # the output is reduced by grad_check's random projection; the
        # Charbonnier kink (width eps) is checked separately below
        return RSTT(cfg, dict(zip(names, vals)))(x)

    return f, [quad] + [params[n] for n in names]


def _charbonnier(rng):
    gt = rng.uniform(0, 1, (2, 3, 4, 4))
    # keep |pred - gt| >= 0.05 so a 1e-4 step never straddles the eps-wide kink
    d = rng.uniform(0.05, 0.5, gt.shape) * rng.choice([-1.0, 1.0], gt.shape)
    return (lambda p: ops.mul(charbonnier(p, gt), float(gt.size)), [Tensor(gt + d, requires_grad=True)])


@dataclass(frozen=True)
class Composite:
    name: str
    build: Callable
    tol: float
    samples: int = 24


COMPOSITES = (
    Composite("softmax_matmul", _softmax_matmul, 1e-6),
    Composite("multi_head_attention", _attention, OP_TOL),
    Composite("swin_encoder_block", _encoder_block, OP_TOL, 4),
    Composite("swin_decoder_block", _decoder_block, OP_TOL, 4),
    Composite("charbonnier", _charbonnier, OP_TOL),
    Composite("end_to_end", _end_to_end, MODEL_TOL, 3),
)


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    cases: int

    @property
    def passed(self) -> bool:
        return self.error < self.tol


def check_op(op: str, seed: int = 0) -> CheckResult:
    cases = OP_CASES.get(op, [])
    worst = 0.0
    with precision(np.float64):
        for i, build in enumerate(cases):
            rng = np.random.default_rng([seed, i, len(op)])
            f, inputs = build(rng)
            worst = max(worst, grad_check(f, inputs, seed=seed + i))
    return CheckResult(op, worst, OP_TOL, len(cases))


def check_composite(comp: Composite, seed: int = 0) -> CheckResult:
    with precision(np.float64):
        f, inputs = comp.build(np.random.default_rng([seed, 7919]))
        err = grad_check(f, inputs, n_samples=comp.samples, seed=seed)
    return CheckResult(comp.name, err, comp.tol, 1)


def run_all(seed: int = 0, include_model: bool = True,
            on_result: Callable[[CheckResult], None] | None = None) -> list[CheckResult]:
    results = []
    for op in DIFFERENTIABLE_OPS:
        results.append(check_op(op, seed))
        if on_result:
            on_result(results[-1])
    for comp in COMPOSITES:
        if comp.name == "end_to_end" and not include_model:
            continue
        results.append(check_composite(comp, seed))
        if on_result:
            on_result(results[-1])
    return results
