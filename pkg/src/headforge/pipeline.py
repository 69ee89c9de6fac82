"""Orchestration of the coarse / fine / edit workflows.

One optimization loop is the single writer of parameters; all randomness
(poses, timesteps, noise seeds, jitter, backgrounds) is drawn sequentially
from the run's PCG64 stream so runs are bit-reproducible and checkpoints
resume exactly. NaN provider gradients skip the whole iteration (moments
untouched) and are counted.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .camera import CameraPose, render_landmark_map, sample_pose, view_bucket
from .config import RunConfig, StageSettings
from .dmtet import TetGrid, TriMesh, build_bcc_lattice, export_obj, init_grid, marching_tets, rasterize_core
from .errors import PoisonedGradientError
from .field import FieldConfig, FieldParams, color_eval
from .guidance import (
    GuidanceConfig,
    GuidanceMode,
    LocalScoreProvider,
    MockNoisePredictor,
    PromptSet,
    RemoteScoreProvider,
    sds_step,
)
from .head_prior import HeadMesh, PriorField
from .images import save_png
from .renderer import render_core, render_image
from .schedule import DiffusionSchedule

VOLATILE_METRIC_KEYS = ("wall_ms", "provider_ms")


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size, np.float32), np.zeros(size, np.float32), 0)


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.99),
    eps: float = 1e-8,
) -> tuple[np.ndarray, AdamState]:
    """Bias-corrected Adam update; rejects non-finite gradients."""
    if params.shape != grads.shape:
        raise ValueError("params/grads shape mismatch")
    if not np.isfinite(grads).all():
        raise PoisonedGradientError("non-finite gradient passed to adam_step")
    b1, b2 = betas
    step = state.step + 1
    m = b1 * state.m.astype(np.float64) + (1 - b1) * grads.astype(np.float64)
    v = b2 * state.v.astype(np.float64) + (1 - b2) * grads.astype(np.float64) ** 2
    m_hat = m / (1 - b1**step)
    v_hat = v / (1 - b2**step)
    new_params = params.astype(np.float64) - lr * m_hat / (np.sqrt(v_hat) + eps)
    return (
        new_params.astype(np.float32),
        AdamState(m.astype(np.float32), v.astype(np.float32), step),
    )


# ---------------------------------------------------------------------------
# Run state


@dataclass
class RunState:
    stage: str
    iteration: int
    params: FieldParams
    prior: PriorField
    rng: np.random.Generator
    config: RunConfig
    grid: TetGrid | None = None
    grid_bounds: tuple | None = None
    base_prompt: str = ""
    adam: dict = dataclass_field(default_factory=dict)
    metrics: list = dataclass_field(default_factory=list)
    skipped_nan: int = 0
    reference_cache: dict = dataclass_field(default_factory=dict)

    def log(self, record: dict, out_dir: Path | None) -> None:
        self.metrics.append(record)
        if out_dir is not None:
            with open(out_dir / "metrics.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def metrics_digest(records) -> str:
    """Hash of the metrics log, excluding wall-clock fields."""
    if isinstance(records, (str, Path)):
        records = [json.loads(line) for line in open(records, encoding="utf-8")]
    h = hashlib.sha256()
    for rec in records:
        clean = {k: v for k, v in rec.items() if k not in VOLATILE_METRIC_KEYS}
        h.update(json.dumps(clean, sort_keys=True).encode())
    return h.hexdigest()


def make_schedule(config: RunConfig) -> DiffusionSchedule:
    s = config.schedule
    return DiffusionSchedule.from_betas(s.num_steps, s.beta_start, s.beta_end)


def make_provider(config: RunConfig, schedule: DiffusionSchedule, mock_target: np.ndarray | None = None):
    if config.guidance.provider == "mock":
        if mock_target is None:
            raise ValueError("the mock provider needs a target image")
        return LocalScoreProvider(MockNoisePredictor(mock_target, schedule), schedule)
    if config.guidance.provider == "remote":
        return RemoteScoreProvider(config.guidance.endpoint)
    raise ValueError(f"unknown provider '{config.guidance.provider}'")


def guidance_config(config: RunConfig, mode: GuidanceMode) -> GuidanceConfig:
    g = config.guidance
    return GuidanceConfig(g.cfg_scale, g.edit_scale, (g.t_lo, g.t_hi), mode)


def _background(config: RunConfig, rng: np.random.Generator) -> np.ndarray:
    policy = config.render.background
    if policy == "random":
        return rng.uniform(0.0, 1.0, 3)
    if policy == "white":
        return np.ones(3)
    if policy == "black":
        return np.zeros(3)
    raise ValueError(f"unknown background policy '{policy}'")


# ---------------------------------------------------------------------------
# Coarse stage


def run_coarse(
    prompts: PromptSet,
    prior: PriorField,
    config: RunConfig,
    provider,
    out_dir: str | Path | None = None,
    state: RunState | None = None,
) -> RunState:
    """Optimize the neural field against the score provider (generate mode)."""
    out_dir = _prepare_out_dir(out_dir)
    stage = config.coarse
    schedule = make_schedule(config)
    gcfg = guidance_config(config, GuidanceMode.GENERATE)

    if state is None:
        rng = np.random.default_rng(np.random.PCG64(stage.seed))
        params = FieldParams.init(_field_config(config), rng)
        state = RunState("coarse", 0, params, prior, rng, config, base_prompt=prompts.base_prompt)
        state.adam = {"field": AdamState.zeros(params.size)}

    res = stage.resolution
    params = state.params
    params.set_requires_grad(True)
    try:
        for it in range(state.iteration, stage.iterations):
            t0 = time.perf_counter()
            bg = _background(config, state.rng)
            params.zero_grad()
            loss = None
            skipped = False
            provider_ms = 0.0
            for _ in range(stage.batch_size):
                pose = sample_pose(config.camera, state.rng)
                bucket = view_bucket(pose.azimuth)
                landmark = render_landmark_map(prior.mesh, pose, config.landmark, res, res)
                rgb, _, _ = render_core(
                    params, prior, pose, res, res,
                    n_samples=config.render.n_samples, background=bg,
                    rng=state.rng, jitter=True, prior_grid_res=config.render.prior_grid_res,
                )
                t_call = time.perf_counter()
                try:
                    grad = sds_step(
                        provider, rgb.detach().numpy(), prompts, bucket, gcfg, schedule,
                        state.rng, landmark_map=landmark,
                    )
                except PoisonedGradientError:
                    state.skipped_nan += 1
                    skipped = True
                    break
                finally:
                    provider_ms += 1000 * (time.perf_counter() - t_call)
                term = (rgb * torch.tensor(grad.data / stage.batch_size, dtype=rgb.dtype)).sum()
                loss = term if loss is None else loss + term
            grad_norm = 0.0
            if not skipped:
                loss.backward()
                flat_grad = params.collect_grad()
                grad_norm = float(np.linalg.norm(flat_grad))
                new_flat, state.adam["field"] = adam_step(
                    params.flatten(), flat_grad, state.adam["field"],
                    stage.lr_field, (stage.beta1, stage.beta2),
                )
                params.load_flat(new_flat)
            state.iteration = it + 1
            state.log(
                {
                    "iter": it, "stage": "coarse", "grad_norm": f"{grad_norm:.6e}",
                    "skipped_nan": state.skipped_nan,
                    "provider_ms": round(provider_ms, 3),
                    "wall_ms": round(1000 * (time.perf_counter() - t0), 3),
                },
                out_dir,
            )
            _periodic_outputs(state, stage, out_dir)
    finally:
        params.set_requires_grad(False)
    return state


# ---------------------------------------------------------------------------
# Fine / edit stages


def _fine_like_run(
    mode: GuidanceMode,
    coarse: RunState,
    prompts: PromptSet,
    config: RunConfig,
    provider,
    out_dir: str | Path | None,
    state: RunState | None,
) -> RunState:
    out_dir = _prepare_out_dir(out_dir)
    stage = config.edit if mode is GuidanceMode.EDIT else config.fine
    stage_name = "edit" if mode is GuidanceMode.EDIT else "fine"
    schedule = make_schedule(config)
    gcfg = guidance_config(config, mode)
    if mode is GuidanceMode.EDIT and not prompts.edit_instruction:
        raise ValueError("edit stage requires an edit_instruction")

    prior = coarse.prior
    if state is None:
        rng = np.random.default_rng(np.random.PCG64(stage.seed))
        center, radius = prior.mesh.bounding_sphere()
        half = radius * 1.25
        bounds = ((center - half).tolist(), (center + half).tolist())
        grid = init_grid(
            stage.grid_resolution, prior, coarse=coarse.params, bounds=bounds,
            prior_grid_res=config.render.prior_grid_res,
        )
        params = coarse.params.clone()
        state = RunState(
            stage_name, 0, params, prior, rng, config,
            grid=grid, grid_bounds=bounds, base_prompt=prompts.base_prompt,
        )
        state.adam = {
            "field": AdamState.zeros(params.size),
            "tet_s": AdamState.zeros(len(grid.s)),
            "tet_dv": AdamState.zeros(grid.dv.numel()),
        }

    res = stage.resolution
    params, grid = state.params, state.grid
    params.set_requires_grad(True)
    grid.s.requires_grad_(True)
    grid.dv.requires_grad_(True)
    try:
        for it in range(state.iteration, stage.iterations):
            t0 = time.perf_counter()
            bg = _background(config, state.rng)
            params.zero_grad()
            grid.s.grad = None
            grid.dv.grad = None
            mesh = marching_tets(grid)
            loss = None
            skipped = False
            provider_ms = 0.0
            for _ in range(stage.batch_size):
                pose = sample_pose(config.camera, state.rng)
                bucket = view_bucket(pose.azimuth)
                landmark = render_landmark_map(prior.mesh, pose, config.landmark, res, res)
                reference = None
                if mode is GuidanceMode.EDIT:
                    reference = render_reference(coarse, pose, res, cache=state.reference_cache)
                img, _ = rasterize_core(mesh, params, pose, res, res, background=bg)
                t_call = time.perf_counter()
                try:
                    grad = sds_step(
                        provider, img.detach().numpy(), prompts, bucket, gcfg, schedule,
                        state.rng, landmark_map=landmark, reference_image=reference,
                    )
                except PoisonedGradientError:
                    state.skipped_nan += 1
                    skipped = True
                    break
                finally:
                    provider_ms += 1000 * (time.perf_counter() - t_call)
                term = (img * torch.tensor(grad.data / stage.batch_size, dtype=img.dtype)).sum()
                loss = term if loss is None else loss + term
            grad_norm = 0.0
            if not skipped:
                loss.backward()
                updates = {
                    "field": (params.flatten(), params.collect_grad(), stage.lr_field),
                    "tet_s": (
                        grid.s.detach().numpy().astype(np.float32),
                        np.zeros(len(grid.s), np.float32) if grid.s.grad is None else grid.s.grad.numpy(),
                        stage.lr_tet,
                    ),
                    "tet_dv": (
                        grid.dv.detach().numpy().astype(np.float32).ravel(),
                        np.zeros(grid.dv.numel(), np.float32) if grid.dv.grad is None else grid.dv.grad.numpy().ravel(),
                        stage.lr_tet,
                    ),
                }
                grad_norm = float(np.sqrt(sum(np.linalg.norm(g) ** 2 for _, g, _ in updates.values())))
                for name, (flat, g, lr) in updates.items():
                    new_flat, state.adam[name] = adam_step(
                        flat, g.astype(np.float32), state.adam[name], lr, (stage.beta1, stage.beta2)
                    )
                    if name == "field":
                        params.load_flat(new_flat)
                    elif name == "tet_s":
                        with torch.no_grad():
                            grid.s.copy_(torch.tensor(new_flat, dtype=grid.s.dtype))
                    else:
                        with torch.no_grad():
                            grid.dv.copy_(torch.tensor(new_flat.reshape(-1, 3), dtype=grid.dv.dtype))
                grid.clamp_offsets()
            state.iteration = it + 1
            state.log(
                {
                    "iter": it, "stage": stage_name, "grad_norm": f"{grad_norm:.6e}",
                    "skipped_nan": state.skipped_nan,
                    "provider_ms": round(provider_ms, 3),
                    "wall_ms": round(1000 * (time.perf_counter() - t0), 3),
                },
                out_dir,
            )
            _periodic_outputs(state, stage, out_dir)
    finally:
        params.set_requires_grad(False)
        grid.s.requires_grad_(False)
        grid.dv.requires_grad_(False)

    if out_dir is not None:
        export_textured_mesh(state, out_dir / f"{stage_name}_mesh.obj")
    return state


def run_fine(coarse, prompts, config, provider, out_dir=None, state=None) -> RunState:
    return _fine_like_run(GuidanceMode.GENERATE, coarse, prompts, config, provider, out_dir, state)


def run_edit(coarse, prompts, config, provider, out_dir=None, state=None) -> RunState:
    return _fine_like_run(GuidanceMode.EDIT, coarse, prompts, config, provider, out_dir, state)


# ---------------------------------------------------------------------------
# References, turntables, exports


def _pose_bin(pose: CameraPose) -> tuple:
    """1-degree angular bins (radius to 0.01, fov to 1 degree)."""
    return (
        int(round(pose.azimuth)) % 360,
        int(round(pose.polar_theta)),
        round(pose.radius, 2),
        int(round(pose.fov)),
    )


def render_reference(
    coarse: RunState, pose: CameraPose, resolution: int = 512, cache: dict | None = None
) -> np.ndarray:
    """Deterministic white-background render of the frozen coarse model."""
    key = (_pose_bin(pose), resolution)
    if cache is not None and key in cache:
        return cache[key]
    out = render_image(
        coarse.params, coarse.prior, pose, resolution, resolution,
        background=(1.0, 1.0, 1.0), rng=None, jitter=False,
        n_samples=coarse.config.render.n_samples,
        prior_grid_res=coarse.config.render.prior_grid_res,
    )
    if cache is not None:
        cache[key] = out.rgb
    return out.rgb


def extract_mesh(state: RunState) -> TriMesh:
    """Surface of the run: fine/edit extract the tet grid; coarse goes through
    a prior-sized grid initialized from the field."""
    if state.grid is not None:
        grid = state.grid
    else:
        grid = init_grid(
            state.config.fine.grid_resolution, state.prior, coarse=state.params,
            prior_grid_res=state.config.render.prior_grid_res,
        )
    with torch.no_grad():
        mesh = marching_tets(grid)
        if len(mesh.vertices):
            colors = color_eval(state.params, mesh.vertices).numpy()
            mesh.vertex_colors = np.clip(colors, 0.0, 1.0)
    return mesh


def export_textured_mesh(state: RunState, path: str | Path) -> TriMesh:
    mesh = extract_mesh(state)
    export_obj(mesh, path)
    return mesh


def render_turntable(
    state: RunState, frames: int, resolution: int | None = None, out_dir: str | Path | None = None
) -> np.ndarray:
    """Equally spaced azimuths at mid theta/radius/fov; returns (N, H, W, 3)."""
    cam = state.config.camera
    theta = sum(cam.theta_range) / 2
    radius = sum(cam.radius_range) / 2
    fov = sum(cam.fov_range) / 2
    res = resolution or state.config.render.export_resolution
    out_dir = _prepare_out_dir(out_dir)

    mesh = extract_mesh(state) if state.grid is not None else None
    images = []
    for i in range(frames):
        pose = CameraPose(360.0 * i / frames, theta, radius, fov)
        if mesh is not None:
            img, _ = rasterize_core(mesh, state.params, pose, res, res, background=(1, 1, 1))
            frame = img.detach().numpy().astype(np.float32)
        else:
            frame = render_image(
                state.params, state.prior, pose, res, res, background=(1, 1, 1),
                rng=None, jitter=False, n_samples=state.config.render.n_samples,
                prior_grid_res=state.config.render.prior_grid_res,
            ).rgb
        images.append(frame)
        if out_dir is not None:
            save_png(out_dir / f"turntable_{i:04d}.png", frame)
    return np.stack(images)


def _prepare_out_dir(out_dir):
    if out_dir is None:
        return None
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _periodic_outputs(state: RunState, stage: StageSettings, out_dir: Path | None):
    if out_dir is None:
        return
    it = state.iteration
    if stage.snapshot_every and it % stage.snapshot_every == 0:
        pose = CameraPose(30.0, 75.0, sum(state.config.camera.radius_range) / 2, 45.0)
        if state.grid is not None:
            with torch.no_grad():
                img, _ = rasterize_core(marching_tets(state.grid), state.params, pose, 256, 256)
            save_png(out_dir / f"snap_{state.stage}_{it:06d}.png", img.numpy())
        else:
            out = render_image(
                state.params, state.prior, pose, 128, 128, rng=None, jitter=False,
                prior_grid_res=state.config.render.prior_grid_res,
            )
            save_png(out_dir / f"snap_{state.stage}_{it:06d}.png", out.rgb)
    if stage.checkpoint_every and it % stage.checkpoint_every == 0:
        checkpoint_save(state, out_dir / "latest.hsck")


def _field_config(config: RunConfig) -> FieldConfig:
    f = config.field_cfg
    return FieldConfig(f.levels, f.features_per_level, f.table_size_log2, f.base_resolution, f.max_resolution)


# ---------------------------------------------------------------------------
# Checkpoints


def checkpoint_save(state: RunState, path: str | Path) -> None:
    meta = {
        "stage": state.stage,
        "iteration": state.iteration,
        "base_prompt": state.base_prompt,
        "skipped_nan": state.skipped_nan,
        "rng_state": state.rng.bit_generator.state,
        "adam_steps": {k: v.step for k, v in state.adam.items()},
        "field_config": {
            "levels": state.params.config.levels,
            "features_per_level": state.params.config.features_per_level,
            "table_size_log2": state.params.config.table_size_log2,
            "base_resolution": state.params.config.base_resolution,
            "max_resolution": state.params.config.max_resolution,
        },
        "prior_a": state.prior.a,
        "landmark_groups": {k: v.tolist() for k, v in state.prior.mesh.landmark_groups.items()},
        "grid": None
        if state.grid is None
        else {"resolution": state.grid.resolution, "bounds": state.grid_bounds},
    }
    blobs = {"meta": json.dumps(meta, sort_keys=True).encode()}
    for name, tensor in state.params.tensors.items():
        blobs[f"field.{name}"] = tensor.detach().numpy()
    for group, adam in state.adam.items():
        blobs[f"adam.{group}.m"] = adam.m
        blobs[f"adam.{group}.v"] = adam.v
    blobs["prior.vertices"] = state.prior.mesh.vertices
    blobs["prior.faces"] = state.prior.mesh.faces
    if state.grid is not None:
        blobs["grid.s"] = state.grid.s.detach().numpy()
        blobs["grid.dv"] = state.grid.dv.detach().numpy()
    ckpt.save_container(path, blobs)


def checkpoint_load(path: str | Path, config: RunConfig | None = None) -> RunState:
    blobs = ckpt.load_container(path)
    meta = json.loads(blobs["meta"].decode())
    config = config or RunConfig()

    fc = meta["field_config"]
    field_config = FieldConfig(
        fc["levels"], fc["features_per_level"], fc["table_size_log2"],
        fc["base_resolution"], fc["max_resolution"],
    )
    params = FieldParams.zeros(field_config)
    for name in params.tensors:
        with torch.no_grad():
            params.tensors[name].copy_(torch.tensor(blobs[f"field.{name}"], dtype=field_config.dtype))

    mesh = HeadMesh(
        blobs["prior.vertices"],
        blobs["prior.faces"],
        {k: np.array(v, dtype=np.int64) for k, v in meta["landmark_groups"].items()},
    )
    prior = PriorField(mesh, meta["prior_a"])

    rng = np.random.default_rng(np.random.PCG64())
    rng.bit_generator.state = meta["rng_state"]

    grid = None
    grid_bounds = None
    if meta["grid"] is not None:
        grid_bounds = meta["grid"]["bounds"]
        verts, tets, cell = build_bcc_lattice(meta["grid"]["resolution"], *grid_bounds)
        grid = TetGrid(
            verts, tets,
            torch.tensor(blobs["grid.s"], dtype=field_config.dtype),
            torch.tensor(blobs["grid.dv"], dtype=field_config.dtype),
            cell, meta["grid"]["resolution"],
        )

    adam = {}
    for group, step in meta["adam_steps"].items():
        adam[group] = AdamState(blobs[f"adam.{group}.m"].astype(np.float32),
                                blobs[f"adam.{group}.v"].astype(np.float32), step)

    state = RunState(
        meta["stage"], meta["iteration"], params, prior, rng, config,
        grid=grid, grid_bounds=grid_bounds, adam=adam,
    )
    state.base_prompt = meta.get("base_prompt", "")
    state.skipped_nan = meta["skipped_nan"]
    return state
