"""Loss, AdamW, the restart schedule and the training loop."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import ops
from .autograd import Tape, Tensor, as_tensor, backward, precision
from .checkpoint import load_checkpoint, save_checkpoint
from .data import TrainSample
from .errors import ConfigError, ContractError, DimensionError, NonFiniteError
from .model import RSTT, ModelConfig, init_params

CHECKPOINT_NAME = "checkpoint.rstt"
LOSS_NAME = "loss.csv"


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 2e-4
    lr_min: float = 1e-7
    restart_period: int = 30000
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    eps_charbonnier: float = 1e-3
    charbonnier_mode: str = "mean"
    batch_size: int = 2
    max_iters: int = 1000
    checkpoint_every: int = 500
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if not 0 <= self.lr_min < self.lr0:
            raise ConfigError(f"need 0 <= lr_min < lr0, got {self.lr_min}, {self.lr0}")
        if self.restart_period < 1:
            raise ConfigError("restart_period must be >= 1")
        if self.eps_charbonnier <= 0:
            raise ConfigError("charbonnier epsilon must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.charbonnier_mode not in ("mean", "global"):
            raise ConfigError(f"charbonnier_mode must be 'mean' or 'global', got {self.charbonnier_mode!r}")
        if self.batch_size < 1 or self.max_iters < 0 or self.checkpoint_every < 1:
            raise ConfigError("batch_size, checkpoint_every must be >= 1 and max_iters >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def charbonnier(pred, gt, eps: float = 1e-3, mode: str = "mean") -> Tensor:
    """``mean(sqrt(d^2 + eps^2))`` elementwise, or ``sqrt(||d||^2 + eps^2)`` in
    ``global`` mode."""
    pred, gt = as_tensor(pred), as_tensor(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"charbonnier: shapes differ {pred.shape} vs {gt.shape}")
    d = ops.sub(pred, gt)
    e2 = eps * eps
    if mode == "mean":
        # mean(sqrt(d^2 + eps^2) - eps) + eps: exactly eps when pred == gt
        return ops.add(ops.mean(ops.sub(ops.sqrt(ops.add(ops.mul(d, d), e2)), eps)), eps)
    if mode == "global":
        return ops.sqrt(ops.add(ops.sum(ops.mul(d, d)), e2))
    raise ConfigError(f"unknown charbonnier mode {mode!r}")


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float,
               config: TrainConfig) -> OptimizerState:
    """One AdamW update, in place on ``params`` (Tensors or arrays).

    Decay multiplies the weights directly (``p *= 1 - lr * wd``) before the
    bias-corrected Adam step.
    """
    if lr <= 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        data = p.data if isinstance(p, Tensor) else p
        if g.shape != data.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter {data.shape}")
        m = state.m.setdefault(name, np.zeros_like(data))
        v = state.v.setdefault(name, np.zeros_like(data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if config.weight_decay:
            data *= 1.0 - lr * config.weight_decay
        data -= lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
    return state


def cosine_restart_lr(iteration: int, config: TrainConfig) -> float:
    """Half-cosine decay from ``lr0`` to ``lr_min``, restarted every ``restart_period``."""
    if iteration < 0:
        raise ContractError("iteration must be >= 0")
    P = config.restart_period
    phase = (iteration % P) / P
    return config.lr_min + (config.lr0 - config.lr_min) * (1.0 + math.cos(math.pi * phase)) / 2.0


@dataclass
class LossRecord:
    iteration: int
    lr: float
    loss: float


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    state: OptimizerState
    history: list[LossRecord]
    checkpoint: Path | None
    seconds: float


def _checkpoint_tensors(params: dict, state: OptimizerState) -> dict:
    out = {name: p.data for name, p in params.items()}
    for name in params:
        if name in state.m:
            out[f"opt.m/{name}"] = state.m[name]
            out[f"opt.v/{name}"] = state.v[name]
    return out


def save_training_state(path, model_config: ModelConfig, params: dict, state: OptimizerState,
                        iteration: int, train_config: TrainConfig | None = None) -> Path:
    meta = {"model": model_config.to_dict(), "iteration": iteration, "optimizer_step": state.step}
    if train_config is not None:
        meta["train"] = asdict(train_config)
    return save_checkpoint(path, _checkpoint_tensors(params, state), meta)


def load_training_state(path, dtype=None) -> tuple[ModelConfig, dict[str, Tensor], OptimizerState, int]:
    ck = load_checkpoint(path)
    if "model" not in ck.meta:
        raise ContractError(f"{path}: checkpoint carries no model config")
    cfg = ModelConfig.from_dict(ck.meta["model"])
    params, state = {}, OptimizerState(step=int(ck.meta.get("optimizer_step", 0)))
    for name, arr in ck.tensors.items():
        arr = arr if dtype is None else arr.astype(dtype)
        if name.startswith("opt.m/"):
            state.m[name[6:]] = arr.copy()
        elif name.startswith("opt.v/"):
            state.v[name[6:]] = arr.copy()
        else:
            params[name] = Tensor(arr.copy(), requires_grad=True)
    return cfg, params, state, int(ck.meta.get("iteration", 0))


def batch_loss(model: RSTT, samples: list[TrainSample], config: TrainConfig) -> Tensor:
    total = None
    for s in samples:
        pred = model(s.quad.astype(model.dtype, copy=False))
        loss = charbonnier(pred, s.target.astype(model.dtype, copy=False), config.eps_charbonnier,
                           config.charbonnier_mode)
        total = loss if total is None else ops.add(total, loss)
    return ops.mul(total, 1.0 / len(samples))


def train_loop(model_config: ModelConfig, train_config: TrainConfig,
               data: Callable[[int], TrainSample], out_dir=None, resume=None,
               params: dict[str, Tensor] | None = None,
               on_record: Callable[[LossRecord], None] | None = None) -> TrainResult:
    """sample -> forward -> Charbonnier -> backward -> AdamW at the scheduled lr.

    With ``out_dir`` set, loss rows are appended to ``loss.csv`` as they are
    produced and a checkpoint is written every ``checkpoint_every``
    iterations and at the end. A non-finite loss aborts before the update,
    leaving the last good checkpoint on disk.
    """
    dtype = np.dtype(train_config.dtype)
    start = 0
    state = OptimizerState()
    if resume is not None:
        ck_cfg, params, state, start = load_training_state(resume, dtype)
        if ck_cfg != model_config:
            raise ConfigError("checkpoint model config differs from the requested one")
    elif params is None:
        params = init_params(model_config, seed=train_config.seed, dtype=dtype)
    model = RSTT(model_config, params)

    out = Path(out_dir) if out_dir is not None else None
    csv_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        csv_fh = open(out / LOSS_NAME, "a" if resume is not None else "w", newline="")
        writer = csv.writer(csv_fh)
        if resume is None:
            writer.writerow(["iteration", "lr", "loss"])
    ck_path = None
    history: list[LossRecord] = []
    t0 = time.perf_counter()
    try:
        with precision(dtype):
            for it in range(start, train_config.max_iters):
                lr = cosine_restart_lr(it, train_config)
                bs = train_config.batch_size
                samples = [data(it * bs + j) for j in range(bs)]
                with Tape() as tape:
                    loss = batch_loss(model, samples, train_config)
                value = loss.item()
                if not math.isfinite(value):
                    tape.reset()
                    raise NonFiniteError(f"non-finite loss at iteration {it}")
                backward(loss, tape)
                grads = {n: p.grad for n, p in params.items() if p.grad is not None}
                adamw_step(params, grads, state, lr, train_config)
                for p in params.values():
                    p.zero_grad()
                rec = LossRecord(it, lr, value)
                history.append(rec)
                if csv_fh is not None:
                    writer.writerow([it, repr(lr), repr(value)])
                    csv_fh.flush()
                if on_record is not None:
                    on_record(rec)
                if out is not None and ((it + 1) % train_config.checkpoint_every == 0
                                        or it + 1 == train_config.max_iters):
                    ck_path = save_training_state(out / CHECKPOINT_NAME, model_config, params, state,
                                                  it + 1, train_config)
    finally:
        if csv_fh is not None:
            csv_fh.close()
    return TrainResult(params, state, history, ck_path, time.perf_counter() - t0)
