"""PNG frame I/O and 8-bit quantization."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ContractError, DimensionError

IMAGE_SUFFIXES = {".png", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg"}
FRAME_PATTERN = "frame_{:04d}.png"


def quantize(x) -> np.ndarray:
    """Clamp to [0, 1] and round half up to uint8."""
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.floor(x * 255.0 + 0.5).astype(np.uint8)


def dequantize(q) -> np.ndarray:
    return np.asarray(q, dtype=np.float32) / np.float32(255.0)


def list_frames(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise ContractError(f"{d} is not a directory")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_frames(directory, expected: int | None = 4) -> np.ndarray:
    """Read images in lexicographic order into ``[T, 3, H, W]`` floats in [0, 1]."""
    paths = list_frames(directory)
    if expected is not None and len(paths) != expected:
        raise ContractError(f"{directory}: expected {expected} frames, found {len(paths)}")
    frames = []
    for p in paths:
        try:
            with Image.open(p) as im:
                arr = np.asarray(im.convert("RGB"))
        except OSError as exc:
            raise ContractError(f"cannot read {p}: {exc}") from exc
        frames.append(arr)
    if len({f.shape for f in frames}) > 1:
        raise DimensionError(f"{directory}: frames differ in size {sorted({f.shape for f in frames})}")
    return dequantize(np.stack(frames).transpose(0, 3, 1, 2))


def save_frames(frames, directory) -> list[Path]:
    """Write ``[T, 3, H, W]`` floats as ``frame_0001.png`` ... (8-bit RGB)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    q = quantize(frames).transpose(0, 2, 3, 1)
    paths = []
    for i, img in enumerate(q, start=1):
        p = d / FRAME_PATTERN.format(i)
        Image.fromarray(img, mode="RGB").save(p)
        paths.append(p)
    return paths


def save_gray(arr: np.ndarray, path) -> None:
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="L").save(path)


def load_gray(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"))
