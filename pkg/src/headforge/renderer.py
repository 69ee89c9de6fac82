"""Differentiable volume rendering of the coarse field.

Per-ray compositing: alpha_i = 1 - exp(-sigma_i * delta_i), W_i = alpha_i *
prod_{j<i} (1 - alpha_j), pixel = sum_i W_i c_i + (1 - sum_i W_i) * background.
Ray intervals come from analytic intersection with a bounding sphere 1.1x the
prior's bounding radius; rays that miss it composite to pure background.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .camera import CameraPose, generate_rays
from .errors import ContractViolationError, ShapeError
from .field import FieldParams, field_eval
from .head_prior import PriorField, cached_distance_grid, prior_density_from_distance

MAX_STEPS_DEFAULT = 1024
_EVAL_CHUNK = 1 << 16
BOUND_SPHERE_SCALE = 1.1


@dataclass
class RaySamples:
    """Sample positions along one ray and the spacing they integrate over."""

    positions: np.ndarray  # (n, 3)
    deltas: np.ndarray  # (n,)
    t: np.ndarray  # (n,) distance from origin

    def __post_init__(self):
        if np.any(self.deltas <= 0):
            raise ContractViolationError("deltas must be positive")
        if len(self.positions) > MAX_STEPS_DEFAULT:
            raise ContractViolationError("sample count exceeds max steps")


@dataclass
class RenderOutput:
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    opacity: np.ndarray  # (H, W) accumulated weight
    depth: np.ndarray  # (H, W) expected depth
    normal: np.ndarray | None = None  # (H, W, 3)


def sample_along_ray(
    ray: tuple[np.ndarray, np.ndarray],
    near: float,
    far: float,
    n: int,
    rng: np.random.Generator | None = None,
    jitter: bool = True,
) -> RaySamples:
    """Stratified-uniform samples: one jittered point per equal sub-interval."""
    if not near < far:
        raise ValueError("need near < far")
    if not 1 <= n <= MAX_STEPS_DEFAULT:
        raise ValueError(f"sample count must be in [1, {MAX_STEPS_DEFAULT}]")
    origin, direction = ray
    u = rng.uniform(0.0, 1.0, size=n) if (jitter and rng is not None) else np.full(n, 0.5)
    width = (far - near) / n
    t = near + (np.arange(n) + u) * width
    deltas = np.empty(n)
    deltas[:-1] = np.diff(t)
    deltas[-1] = far - t[-1] if far > t[-1] else width
    positions = np.asarray(origin) + t[:, None] * np.asarray(direction)
    return RaySamples(positions, deltas, t)


def composite(sigmas, colors, deltas, background) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Front-to-back compositing. Accepts (..., n) sigma/delta, (..., n, 3) colors.

    Returns (pixel rgb (..., 3), weights (..., n), opacity (...,)).
    """
    sigmas = torch.as_tensor(sigmas)
    colors = torch.as_tensor(colors)
    deltas = torch.as_tensor(deltas)
    background = torch.as_tensor(background, dtype=colors.dtype)
    if sigmas.shape != deltas.shape or colors.shape[:-1] != sigmas.shape:
        raise ShapeError("sigmas, deltas and colors disagree in shape")
    if (sigmas < 0).any():
        raise ContractViolationError("negative density passed to composite")
    alpha = 1.0 - torch.exp(-sigmas * deltas)
    one_minus = 1.0 - alpha
    trans = torch.cumprod(
        torch.cat([torch.ones_like(one_minus[..., :1]), one_minus[..., :-1]], dim=-1), dim=-1
    )
    weights = alpha * trans
    opacity = weights.sum(dim=-1)
    pixel = (weights[..., None] * colors).sum(dim=-2) + (1.0 - opacity)[..., None] * background
    return pixel, weights, opacity


def ray_sphere_interval(origins, dirs, center, radius) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Entry/exit parameters of each unit-direction ray with a sphere."""
    oc = origins - center
    b = np.einsum("...i,...i->...", oc, dirs)
    c = np.einsum("...i,...i->...", oc, oc) - radius**2
    disc = b * b - c
    hit = disc > 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    near = np.maximum(-b - sq, 1e-4)
    far = -b + sq
    hit &= far > near
    return near, far, hit


def _stratified_batch(near, far, n, rng, jitter, dtype):
    """(R,) near/far -> t (R, n) and deltas (R, n), matching sample_along_ray."""
    R = len(near)
    u = rng.uniform(0.0, 1.0, size=(R, n)) if (jitter and rng is not None) else np.full((R, n), 0.5)
    width = ((far - near) / n)[:, None]
    t = near[:, None] + (np.arange(n)[None, :] + u) * width
    deltas = np.concatenate([np.diff(t, axis=1), np.maximum(far[:, None] - t[:, -1:], width)], axis=1)
    return torch.tensor(t, dtype=dtype), torch.tensor(deltas, dtype=dtype)


def render_core(
    params: FieldParams | None,
    prior: PriorField,
    pose: CameraPose,
    width: int,
    height: int,
    n_samples: int = 64,
    background=(1.0, 1.0, 1.0),
    rng: np.random.Generator | None = None,
    jitter: bool = True,
    prior_grid_res: int = 96,
    dtype: torch.dtype | None = None,
):
    """Shared forward pass; differentiable w.r.t. params when they carry grad.

    With `params=None` the prior density field itself is rendered (grey color),
    which is the reference silhouette / sanity-check mode.
    """
    if dtype is None:
        dtype = params.config.dtype if params is not None else torch.float32
    if params is not None:
        params.validate_finite()
    n_samples = min(n_samples, MAX_STEPS_DEFAULT)
    origins, dirs = generate_rays(pose, width, height)
    origins = origins.reshape(-1, 3)
    dirs = dirs.reshape(-1, 3)
    center, radius = prior.mesh.bounding_sphere()
    near, far, hit = ray_sphere_interval(origins, dirs, center, radius * BOUND_SPHERE_SCALE)

    grid = cached_distance_grid(prior, prior_grid_res) if prior_grid_res else None
    distance_fn = grid.query if grid is not None else None

    bg = torch.as_tensor(np.asarray(background, dtype=np.float64), dtype=dtype)
    R = len(origins)
    rgb = bg.expand(R, 3).clone()
    opacity = torch.zeros(R, dtype=dtype)
    depth = torch.zeros(R, dtype=dtype)

    idx = np.nonzero(hit)[0]
    if idx.size:
        t, deltas = _stratified_batch(near[idx], far[idx], n_samples, rng, jitter, dtype)
        o = torch.tensor(origins[idx], dtype=dtype)
        d = torch.tensor(dirs[idx], dtype=dtype)
        pos = (o[:, None, :] + t[..., None] * d[:, None, :]).reshape(-1, 3)

        sig_chunks, rgb_chunks = [], []
        for s in range(0, len(pos), _EVAL_CHUNK):
            chunk = pos[s : s + _EVAL_CHUNK]
            if params is None:
                dvals = (distance_fn or (lambda p: _exact_distance(prior, p)))(chunk.numpy())
                sig = torch.tensor(prior_density_from_distance(dvals, prior.a), dtype=dtype)
                col = torch.full((len(chunk), 3), 0.5, dtype=dtype)
            else:
                sig, col, _ = field_eval(params, prior, chunk, distance_fn=distance_fn, validate=False)
            sig_chunks.append(sig)
            rgb_chunks.append(col)
        sigmas = torch.cat(sig_chunks).reshape(len(idx), n_samples)
        colors = torch.cat(rgb_chunks).reshape(len(idx), n_samples, 3)

        pix, weights, op = composite(sigmas, colors, deltas, bg)
        hit_t = torch.tensor(np.array(idx), dtype=torch.long)
        rgb = rgb.index_put((hit_t,), pix)
        opacity = opacity.index_put((hit_t,), op)
        depth = depth.index_put((hit_t,), (weights * t).sum(dim=-1))

    return rgb.reshape(height, width, 3), opacity.reshape(height, width), depth.reshape(height, width)


def _exact_distance(prior: PriorField, pts: np.ndarray) -> np.ndarray:
    from .head_prior import signed_distance

    return signed_distance(prior, pts)


def render_image(
    params: FieldParams | None,
    prior: PriorField,
    pose: CameraPose,
    width: int,
    height: int,
    background=(1.0, 1.0, 1.0),
    rng: np.random.Generator | None = None,
    n_samples: int = 64,
    jitter: bool = True,
    prior_grid_res: int = 96,
    compute_normals: bool = False,
    predicted_normals: bool = False,
) -> RenderOutput:
    """Per-pixel composite over stratified ray samples; deterministic per seed.

    Normal maps default to density-gradient normals via central differences;
    `predicted_normals=True` switches to the field's raw normal head.
    """
    with torch.no_grad():
        rgb, opacity, depth = render_core(
            params, prior, pose, width, height, n_samples, background, rng, jitter, prior_grid_res
        )
        normal = None
        if compute_normals:
            normal = _normal_map(
                params, prior, pose, width, height, depth, opacity, prior_grid_res, predicted_normals
            )
    return RenderOutput(
        rgb.numpy().astype(np.float32),
        opacity.numpy().astype(np.float32),
        depth.numpy().astype(np.float32),
        normal,
    )


def _normal_map(params, prior, pose, width, height, depth, opacity, prior_grid_res, predicted, h=1e-3):
    """Surface normals at the expected-depth points of each pixel."""
    origins, dirs = generate_rays(pose, width, height)
    pts = origins + depth.numpy()[..., None] * dirs
    flat = pts.reshape(-1, 3)
    grid = cached_distance_grid(prior, prior_grid_res) if prior_grid_res else None
    distance_fn = grid.query if grid is not None else None

    if predicted and params is not None:
        from .field import raw_outputs

        with torch.no_grad():
            raw_n, _, _ = raw_outputs(params, torch.tensor(flat, dtype=params.config.dtype))
        grad = -raw_n.numpy().astype(np.float64)
    else:
        def density(p):
            if params is None:
                d = (distance_fn or (lambda q: _exact_distance(prior, q)))(p)
                return prior_density_from_distance(d, prior.a)
            with torch.no_grad():
                sig, _, _ = field_eval(
                    params, prior, torch.tensor(p, dtype=torch.float32), distance_fn, validate=False
                )
            return sig.numpy().astype(np.float64)

        grad = np.zeros_like(flat)
        for axis in range(3):
            dp = np.zeros(3)
            dp[axis] = h
            grad[:, axis] = (density(flat + dp) - density(flat - dp)) / (2 * h)

    norm = np.linalg.norm(grad, axis=1, keepdims=True)
    n = np.where(norm > 1e-12, -grad / np.maximum(norm, 1e-12), 0.0)
    n = n.reshape(height, width, 3)
    return np.where(opacity.numpy()[..., None] > 0.5, n, 0.0).astype(np.float32)


def render_backward(
    params: FieldParams,
    prior: PriorField,
    pose: CameraPose,
    width: int,
    height: int,
    upstream: np.ndarray,
    background=(1.0, 1.0, 1.0),
    rng: np.random.Generator | None = None,
    n_samples: int = 64,
    jitter: bool = True,
    prior_grid_res: int = 96,
) -> np.ndarray:
    """Parameter gradient of sum(render * upstream), in the flat index layout.

    The forward inputs (including the rng state) must match the render being
    differentiated; reverse accumulation is exact through compositing and the
    field evaluation.
    """
    upstream = np.asarray(upstream)
    if upstream.shape != (height, width, 3):
        raise ShapeError(f"upstream gradient must be ({height}, {width}, 3)")
    params.set_requires_grad(True)
    params.zero_grad()
    try:
        rgb, _, _ = render_core(
            params, prior, pose, width, height, n_samples, background, rng, jitter, prior_grid_res
        )
        loss = (rgb * torch.tensor(upstream, dtype=rgb.dtype)).sum()
        loss.backward()
        return params.collect_grad()
    finally:
        params.set_requires_grad(False)


def silhouette_mask(output: RenderOutput, threshold: float = 0.95) -> np.ndarray:
    """Solid-interior mask of a render: pixels whose opacity saturated.

    The prior transfer keeps a low-density skirt outside the surface (support
    out to 5a), so a mask at 0.5 would dilate the silhouette by the skirt
    width; the high threshold recovers the opaque interior.
    """
    return output.opacity > threshold
