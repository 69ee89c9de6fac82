"""Coarse-stage neural scene: multiresolution hash-grid encoder + small MLP.

The encoder concatenates per-level trilinear lookups into a 32-vector; the
MLP maps it to (3 normals, 1 raw density, 3 raw RGB). Density composes with
the head-prior residual in pre-activation space:

    sigma = softplus(raw_density + sigma_bar(x)),  rgb = sigmoid(raw_rgb)

so that with zero weights the density reduces to the prior transfer exactly
wherever sigma_bar is positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import PoisonedParameterError
from .head_prior import PriorField, prior_density_from_distance, signed_distance

_HASH_PRIMES = (1, 2654435761, 805459861)

MLP_WIDTHS = (32, 64, 64, 7)  # fixed architecture; 7 = 3 normals + 1 density + 3 rgb


@dataclass(frozen=True)
class FieldConfig:
    levels: int = 16
    features_per_level: int = 2
    table_size_log2: int = 19
    base_resolution: int = 16
    max_resolution: int = 2048
    dtype: torch.dtype = torch.float32

    def __post_init__(self):
        if self.levels * self.features_per_level != 32:
            raise ValueError("encoder output dimensionality must be exactly 32")

    @property
    def growth(self) -> float:
        if self.levels == 1:
            return 1.0
        return math.exp(math.log(self.max_resolution / self.base_resolution) / (self.levels - 1))

    def level_resolution(self, level: int) -> int:
        return int(math.floor(self.base_resolution * self.growth**level))

    def level_table_entries(self, level: int) -> int:
        n = self.level_resolution(level)
        dense = (n + 1) ** 3
        return min(dense, 2**self.table_size_log2)

    def level_is_dense(self, level: int) -> bool:
        return (self.level_resolution(level) + 1) ** 3 <= 2**self.table_size_log2


class FieldParams:
    """Encoder tables + MLP weights with a stable flat index map."""

    def __init__(self, config: FieldConfig, tensors: dict[str, torch.Tensor]):
        self.config = config
        self.tensors = tensors

    @staticmethod
    def parameter_shapes(config: FieldConfig) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for lvl in range(config.levels):
            shapes[f"enc.level{lvl:02d}"] = (config.level_table_entries(lvl), config.features_per_level)
        for i in range(len(MLP_WIDTHS) - 1):
            shapes[f"mlp.w{i}"] = (MLP_WIDTHS[i], MLP_WIDTHS[i + 1])
            shapes[f"mlp.b{i}"] = (MLP_WIDTHS[i + 1],)
        return shapes

    @classmethod
    def init(cls, config: FieldConfig, rng: np.random.Generator) -> "FieldParams":
        """He-uniform MLP weights, zero biases, tables uniform in +-1e-4."""
        tensors = {}
        for name, shape in cls.parameter_shapes(config).items():
            if name.startswith("enc."):
                arr = rng.uniform(-1e-4, 1e-4, size=shape)
            elif name.startswith("mlp.w"):
                bound = math.sqrt(6.0 / shape[0])
                arr = rng.uniform(-bound, bound, size=shape)
            else:
                arr = np.zeros(shape)
            tensors[name] = torch.tensor(arr, dtype=config.dtype)
        return cls(config, tensors)

    @classmethod
    def zeros(cls, config: FieldConfig) -> "FieldParams":
        return cls(
            config,
            {name: torch.zeros(shape, dtype=config.dtype) for name, shape in cls.parameter_shapes(config).items()},
        )

    # --- flat views -------------------------------------------------------

    def index_map(self) -> dict[str, tuple[int, tuple[int, ...]]]:
        out, offset = {}, 0
        for name, t in self.tensors.items():
            out[name] = (offset, tuple(t.shape))
            offset += t.numel()
        return out

    @property
    def size(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.detach().cpu().numpy().ravel() for t in self.tensors.values()])

    def load_flat(self, flat: np.ndarray) -> None:
        offset = 0
        for t in self.tensors.values():
            n = t.numel()
            with torch.no_grad():
                t.copy_(torch.tensor(flat[offset : offset + n].reshape(tuple(t.shape)), dtype=t.dtype))
            offset += n

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.tensors.values():
            t.requires_grad_(flag)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def collect_grad(self) -> np.ndarray:
        """Gradient in the flat layout; untouched parameters contribute zeros."""
        np_dtype = np.float64 if self.config.dtype == torch.float64 else np.float32
        parts = []
        for t in self.tensors.values():
            if t.grad is None:
                parts.append(np.zeros(t.numel(), dtype=np_dtype))
            else:
                parts.append(t.grad.detach().cpu().numpy().ravel())
        return np.concatenate(parts)

    def clone(self) -> "FieldParams":
        return FieldParams(self.config, {k: v.detach().clone() for k, v in self.tensors.items()})

    def validate_finite(self) -> None:
        for name, t in self.tensors.items():
            if not torch.isfinite(t).all():
                raise PoisonedParameterError(f"non-finite values in parameter '{name}'")


# ---------------------------------------------------------------------------
# Encoder


def _corner_indices(cfg: FieldConfig, level: int, corners: torch.Tensor) -> torch.Tensor:
    """Map integer corner coords (P, 8, 3) to table rows for one level."""
    n = cfg.level_resolution(level)
    if cfg.level_is_dense(level):
        stride = n + 1
        return corners[..., 0] + stride * (corners[..., 1] + stride * corners[..., 2])
    mask = 2**cfg.table_size_log2 - 1
    h = corners[..., 0] * _HASH_PRIMES[0]
    h = torch.bitwise_xor(h, corners[..., 1] * _HASH_PRIMES[1])
    h = torch.bitwise_xor(h, corners[..., 2] * _HASH_PRIMES[2])
    return torch.bitwise_and(h, mask)


_CUBE_OFFSETS = torch.tensor(
    [[x, y, z] for z in (0, 1) for y in (0, 1) for x in (0, 1)], dtype=torch.int64
)


def encode(params: FieldParams, x: torch.Tensor) -> torch.Tensor:
    """gamma(x): per-level trilinear hash-table interpolation, concatenated.

    `x` is (P, 3) in [-1, 1]^3 (clamped otherwise); output is (P, 32).
    """
    cfg = params.config
    x01 = (x.clamp(-1.0, 1.0) + 1.0) * 0.5
    feats = []
    for lvl in range(cfg.levels):
        n = cfg.level_resolution(lvl)
        pos = x01 * n
        i0 = pos.floor().long().clamp(0, n - 1)
        frac = pos - i0.to(pos.dtype)
        corners = i0[:, None, :] + _CUBE_OFFSETS[None, :, :]
        rows = _corner_indices(cfg, lvl, corners)
        table = params.tensors[f"enc.level{lvl:02d}"]
        vals = table[rows.reshape(-1)].reshape(*rows.shape, cfg.features_per_level)
        w = torch.where(_CUBE_OFFSETS[None, :, :].bool(), frac[:, None, :], 1.0 - frac[:, None, :])
        weight = w.prod(dim=-1)
        feats.append((vals * weight[..., None]).sum(dim=1))
    return torch.cat(feats, dim=-1)


def mlp_forward(params: FieldParams, features: torch.Tensor) -> torch.Tensor:
    h = torch.relu(features @ params.tensors["mlp.w0"] + params.tensors["mlp.b0"])
    h = torch.relu(h @ params.tensors["mlp.w1"] + params.tensors["mlp.b1"])
    return h @ params.tensors["mlp.w2"] + params.tensors["mlp.b2"]


def raw_outputs(params: FieldParams, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(raw_normals, raw_density, raw_rgb) before any activation."""
    out = mlp_forward(params, encode(params, x))
    return out[:, 0:3], out[:, 3], out[:, 4:7]


def field_eval(
    params: FieldParams,
    prior: PriorField,
    x: torch.Tensor | np.ndarray,
    distance_fn=None,
    validate: bool = True,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Density, color and raw normals at points x.

    `distance_fn` overrides the signed-distance source (e.g. a baked grid);
    the default is the exact mesh query. Returns (sigma (P,), rgb (P, 3),
    normals (P, 3)).
    """
    if validate:
        params.validate_finite()
    if not torch.is_tensor(x):
        x = torch.tensor(np.atleast_2d(x), dtype=params.config.dtype)
    d = (distance_fn or (lambda p: signed_distance(prior, p)))(x.detach().cpu().numpy())
    sigma_bar = torch.tensor(prior_density_from_distance(d, prior.a), dtype=x.dtype)
    normals, raw_density, raw_rgb = raw_outputs(params, x)
    sigma = torch.nn.functional.softplus(raw_density + sigma_bar)
    rgb = torch.sigmoid(raw_rgb)
    return sigma, rgb, normals


def color_eval(params: FieldParams, x: torch.Tensor) -> torch.Tensor:
    """Color head only (used by the fine stage to texture extracted surfaces)."""
    _, _, raw_rgb = raw_outputs(params, x)
    return torch.sigmoid(raw_rgb)
