"""Synthetic moving-texture clips and the LR/HR training protocol."""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .resample import bicubic_downsample

INPUT_STAMPS = (0, 2, 4, 6)  # frames 1, 3, 5, 7 of the septet


@dataclass(frozen=True)
class MovingObject:
    x0: float
    y0: float
    w: float
    h: float
    vx: float
    vy: float
    color: tuple[float, float, float]
    freq: tuple[float, float]
    phase: float
    contrast: float

    def position(self, t: float) -> tuple[float, float]:
        return self.x0 + self.vx * t, self.y0 + self.vy * t


@dataclass(frozen=True)
class SynthScene:
    H: int
    W: int
    background: tuple  # (base rgb, amplitude rgb, fx, fy, phase)
    objects: tuple[MovingObject, ...]

    def coverage(self, i: int, t: float) -> np.ndarray:
        """Fraction of each pixel covered by object ``i`` at time ``t``."""
        o = self.objects[i]
        x, y = o.position(t)
        cx = np.clip(np.minimum(np.arange(self.W) + 1.0, x + o.w) - np.maximum(np.arange(self.W), x), 0, 1)
        cy = np.clip(np.minimum(np.arange(self.H) + 1.0, y + o.h) - np.maximum(np.arange(self.H), y), 0, 1)
        return cy[:, None] * cx[None, :]

    def render(self, t: float) -> np.ndarray:
        yy, xx = np.mgrid[0:self.H, 0:self.W] + 0.5
        base, amp, fx, fy, ph = self.background
        wave = np.sin(2 * np.pi * (fx * xx + fy * yy) + ph)
        img = np.asarray(base)[:, None, None] + np.asarray(amp)[:, None, None] * wave
        for i, o in enumerate(self.objects):
            x, y = o.position(t)
            # texture is attached to the object, so it moves with it
            tex = 0.5 + 0.5 * np.sin(2 * np.pi * (o.freq[0] * (xx - x) + o.freq[1] * (yy - y)) + o.phase)
            layer = np.asarray(o.color)[:, None, None] * (1 - o.contrast + o.contrast * tex)
            a = self.coverage(i, t)
            img = img * (1 - a) + layer * a
        return np.clip(img, 0.0, 1.0)


def make_scene(seed: int, H: int, W: int, max_speed: float = 1.5) -> SynthScene:
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.2, 0.8, 3)
    amp = rng.uniform(0.05, 0.2, 3)
    background = (tuple(base), tuple(amp), rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05),
                  rng.uniform(0, 2 * np.pi))
    objects = []
    for _ in range(rng.integers(2, 5)):
        w = rng.uniform(0.2, 0.45) * W
        h = rng.uniform(0.2, 0.45) * H
        speed = rng.uniform(0.3, 1.0) * max_speed
        ang = rng.uniform(0, 2 * np.pi)
        vx, vy = speed * np.cos(ang), speed * np.sin(ang)
        # keep the whole trajectory inside the frame
        lo_x, hi_x = max(0.0, -6 * vx), W - w - max(0.0, 6 * vx)
        lo_y, hi_y = max(0.0, -6 * vy), H - h - max(0.0, 6 * vy)
        objects.append(MovingObject(
            x0=rng.uniform(lo_x, max(lo_x, hi_x)), y0=rng.uniform(lo_y, max(lo_y, hi_y)),
            w=w, h=h, vx=vx, vy=vy,
            color=tuple(rng.uniform(0.1, 0.9, 3)),
            freq=(rng.uniform(0.05, 0.25), rng.uniform(0.05, 0.25)),
            phase=rng.uniform(0, 2 * np.pi), contrast=rng.uniform(0.3, 0.8),
        ))
    return SynthScene(H, W, background, tuple(objects))


def synth_clip(seed: int, T: int = 7, H: int = 128, W: int = 128, max_speed: float = 1.5,
               dtype=np.float32) -> np.ndarray:
    """Deterministic clip ``[T, 3, H, W]`` in [0, 1]: 2-4 textured rectangles
    moving at constant sub-pixel velocity over a sinusoidal background."""
    if H < 32 or W < 32 or H % 4 or W % 4:
        raise DimensionError(f"synth_clip needs H, W >= 32 and divisible by 4, got {H}x{W}")
    scene = make_scene(seed, H, W, max_speed)
    return np.stack([scene.render(t) for t in range(T)]).astype(dtype)


@dataclass
class TrainSample:
    quad: np.ndarray    # [4, 3, H, W]
    target: np.ndarray  # [7, 3, 4H, 4W]

    def __post_init__(self):
        if self.quad.shape[0] != 4 or self.target.shape[0] != 7:
            raise DimensionError("a sample pairs 4 input frames with 7 target frames")
        if self.target.shape[2:] != tuple(4 * s for s in self.quad.shape[2:]):
            raise DimensionError(f"target {self.target.shape} is not 4x input {self.quad.shape}")


def degrade(sept: np.ndarray) -> TrainSample:
    """Bicubic x4 downsampling of the odd-stamp frames; the septet is the target."""
    sept = np.asarray(sept)
    if sept.ndim != 4 or sept.shape[0] != 7:
        raise DimensionError(f"degrade expects [7, 3, H, W], got {sept.shape}")
    if sept.shape[2] % 4 or sept.shape[3] % 4:
        raise DimensionError(f"degrade: {sept.shape[2]}x{sept.shape[3]} not divisible by 4")
    quad = np.stack([bicubic_downsample(sept[i], 4) for i in INPUT_STAMPS])
    return TrainSample(quad=quad, target=sept)


class SyntheticClips:
    """Indexable data source of degraded synthetic clips.

    ``n_clips`` bounds the pool (indices wrap around); ``None`` gives a new
    scene for every index.
    """

    def __init__(self, seed: int = 0, H: int = 128, W: int = 128, n_clips: int | None = None,
                 max_speed: float = 1.5, dtype=np.float32):
        if n_clips is not None and n_clips < 1:
            raise ContractError("n_clips must be positive")
        self.seed, self.H, self.W, self.n_clips = seed, H, W, n_clips
        self.max_speed, self.dtype = max_speed, np.dtype(dtype)
        self._get = functools.lru_cache(maxsize=64)(self._make)

    def _make(self, index: int) -> TrainSample:
        sept = synth_clip(self.seed * 1_000_003 + index, H=self.H, W=self.W,
                          max_speed=self.max_speed, dtype=np.float64)
        s = degrade(sept)
        return TrainSample(s.quad.astype(self.dtype), s.target.astype(self.dtype))

    def __call__(self, index: int) -> TrainSample:
        if self.n_clips is not None:
            index %= self.n_clips
        return self._get(index)
