"""PNG snapshots (8-bit sRGB) for render outputs."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(image: np.ndarray) -> np.ndarray:
    if image.dtype == np.uint8:
        return image
    return np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)


def save_png(path: str | Path, image: np.ndarray) -> None:
    arr = to_uint8(image)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    Image.fromarray(arr).save(Path(path), format="PNG")


def load_png(path: str | Path) -> np.ndarray:
    """Float image in [0, 1]."""
    return np.asarray(Image.open(Path(path)).convert("RGB"), dtype=np.float64) / 255.0
