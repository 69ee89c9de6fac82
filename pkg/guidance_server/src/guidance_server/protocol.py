"""Wire protocol v1: request/response schemas and tensor codecs."""

from __future__ import annotations

import base64
import io
from typing import Literal

import numpy as np
from pydantic import BaseModel, field_validator

PROTOCOL_VERSION = "1"
MODES = ("generate", "edit")


class TensorPayload(BaseModel):
    shape: list[int]
    data_b64: str


class ScoreBody(BaseModel):
    mode: Literal["generate", "edit"]
    image: TensorPayload
    prompt: str
    instruction: str | None = None
    timestep: int
    noise_seed: int
    cfg_scale: float
    edit_scale: float = 0.6
    landmark_png_b64: str | None = None
    reference_png_b64: str | None = None

    @field_validator("timestep")
    @classmethod
    def _timestep_nonnegative(cls, v):
        if v < 0:
            raise ValueError("timestep must be >= 0")
        return v

    @field_validator("cfg_scale")
    @classmethod
    def _cfg_at_least_one(cls, v):
        if v < 1.0:
            raise ValueError("cfg_scale must be >= 1")
        return v

    @field_validator("edit_scale")
    @classmethod
    def _edit_scale_unit(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError("edit_scale must be in [0, 1]")
        return v


def decode_tensor(payload: TensorPayload) -> np.ndarray:
    raw = base64.b64decode(payload.data_b64)
    arr = np.frombuffer(raw, dtype="<f4")
    expected = int(np.prod(payload.shape))
    if arr.size != expected:
        raise ValueError(f"tensor payload carries {arr.size} floats, shape wants {expected}")
    return arr.reshape(payload.shape).astype(np.float64)


def encode_tensor(arr: np.ndarray) -> dict:
    data = np.ascontiguousarray(arr, dtype="<f4")
    return {"shape": list(arr.shape), "data_b64": base64.b64encode(data.tobytes()).decode("ascii")}


def decode_png(b64: str | None) -> np.ndarray | None:
    if b64 is None:
        return None
    from PIL import Image

    raw = base64.b64decode(b64)
    img = Image.open(io.BytesIO(raw)).convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0
