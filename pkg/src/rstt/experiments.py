"""Desk-scale experiments shared by ``scripts/`` and the acceptance suite."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .autograd import precision
from .data import SyntheticClips
from .metrics import psnr_y
from .model import RSTT, ModelConfig, count_params, param_shapes
from .resample import trilinear_resize
from .train import TrainConfig, train_loop

OVERFIT_MODEL = ModelConfig(C=32, blocks_per_stage=1)
OVERFIT_TRAIN = TrainConfig(lr0=2e-3, batch_size=1, max_iters=300, checkpoint_every=10**9)
ABLATION_MODEL = ModelConfig(C=16, blocks_per_stage=1)
ABLATION_TRAIN = TrainConfig(lr0=1e-3, batch_size=1, max_iters=50, checkpoint_every=10**9)


@dataclass
class OverfitReport:
    first_loss: float
    last_loss: float
    psnr_model: float
    psnr_warm: float
    seconds: float

    @property
    def loss_ratio(self) -> float:
        return self.last_loss / self.first_loss

    @property
    def gain_db(self) -> float:
        return self.psnr_model - self.psnr_warm


def overfit_one_clip(iters: int = 300, lr_height: int = 32, lr_width: int = 48, seed: int = 0,
                     model_config: ModelConfig = OVERFIT_MODEL, on_record=None) -> OverfitReport:
    """Train on a single synthetic septet and compare against the trilinear warm start."""
    tc = replace(OVERFIT_TRAIN, max_iters=iters, seed=seed)
    data = SyntheticClips(seed=seed, H=4 * lr_height, W=4 * lr_width, n_clips=1)
    res = train_loop(model_config, tc, data, on_record=on_record)
    sample = data(0)
    with precision(np.float32):
        pred = RSTT(model_config, res.params)(sample.quad).data
    warm = trilinear_resize(sample.quad, 7, 4 * lr_height, 4 * lr_width).data
    return OverfitReport(res.history[0].loss, res.history[-1].loss,
                         psnr_y(pred, sample.target), psnr_y(warm, sample.target), res.seconds)


@dataclass
class AblationRow:
    fusion: str
    recon: bool
    params: int
    enumerated: int
    first_loss: float
    last_loss: float
    finite: bool
    seconds: float


def run_ablation(iters: int = 50, hr_size: int = 64, seed: int = 0,
                 model_config: ModelConfig = ABLATION_MODEL, modes=("mca", "concat", "add"),
                 on_row=None) -> list[AblationRow]:
    """Short training runs for every fusion mode, plus the recon-block toggle on the base mode."""
    tc = replace(ABLATION_TRAIN, max_iters=iters, seed=seed)
    data = SyntheticClips(seed=seed, H=hr_size, W=hr_size)
    variants = [(m, False) for m in modes] + [(modes[0], True)]
    rows = []
    for fusion, recon in variants:
        cfg = replace(model_config, fusion=fusion, recon_block=recon)
        res = train_loop(cfg, tc, data)
        losses = [r.loss for r in res.history]
        enumerated = sum(int(np.prod(s)) for s, _ in param_shapes(cfg).values())
        row = AblationRow(fusion, recon, count_params(cfg), enumerated, losses[0], losses[-1],
                          all(math.isfinite(v) for v in losses), res.seconds)
        rows.append(row)
        if on_row is not None:
            on_row(row)
    return rows
