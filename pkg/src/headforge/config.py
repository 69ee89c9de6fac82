"""Run configuration: dataclasses plus the TOML key schema of the CLI."""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .camera import CameraRanges, LandmarkStyle

ENDPOINT_ENV_VAR = "HEADFORGE_ENDPOINT"


@dataclass(frozen=True)
class ScheduleSettings:
    num_steps: int = 1000
    beta_start: float = 0.00085
    beta_end: float = 0.012


@dataclass(frozen=True)
class RenderSettings:
    max_steps: int = 1024
    n_samples: int = 128
    background: str = "random"  # random | white | black
    prior_grid_res: int = 96
    export_resolution: int = 256


@dataclass(frozen=True)
class GuidanceSettings:
    provider: str = "mock"  # mock | remote
    endpoint: str = "http://127.0.0.1:8100"
    cfg_scale: float = 100.0
    edit_scale: float = 0.6
    back_token: str = "<back-view>"
    t_lo: float = 0.02
    t_hi: float = 0.98


@dataclass(frozen=True)
class FieldSettings:
    levels: int = 16
    features_per_level: int = 2
    table_size_log2: int = 19
    base_resolution: int = 16
    max_resolution: int = 2048


@dataclass(frozen=True)
class StageSettings:
    iterations: int
    resolution: int
    lr_field: float = 1e-3
    lr_tet: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.99
    batch_size: int = 4
    seed: int = 0
    warmup: int = 0
    grid_resolution: int = 128
    snapshot_every: int = 0  # 0 disables
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if self.resolution < 8:
            raise ValueError("render resolution must be >= 8")


@dataclass(frozen=True)
class RunConfig:
    schedule: ScheduleSettings = field(default_factory=ScheduleSettings)
    camera: CameraRanges = field(default_factory=CameraRanges)
    landmark: LandmarkStyle = field(default_factory=LandmarkStyle)
    render: RenderSettings = field(default_factory=RenderSettings)
    guidance: GuidanceSettings = field(default_factory=GuidanceSettings)
    field_cfg: FieldSettings = field(default_factory=FieldSettings)
    coarse: StageSettings = field(default_factory=lambda: StageSettings(7000, 64))
    fine: StageSettings = field(default_factory=lambda: StageSettings(5000, 512))
    edit: StageSettings = field(default_factory=lambda: StageSettings(5000, 512))


_SECTION_FIELDS = {
    "schedule": ScheduleSettings,
    "render": RenderSettings,
    "guidance": GuidanceSettings,
    "field": FieldSettings,
    "coarse": StageSettings,
    "fine": StageSettings,
    "edit": StageSettings,
}


def _apply_section(current, cls, data: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown key(s) in [{section}]: {sorted(unknown)}")
    return replace(current, **data)


def load_config(path: str | Path | None = None) -> RunConfig:
    """Config file -> RunConfig; HEADFORGE_ENDPOINT overrides guidance.endpoint."""
    cfg = RunConfig()
    if path is not None:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
        updates = {}
        for section, payload in data.items():
            if section == "camera":
                pairs = {}
                for key in ("theta", "radius", "fov"):
                    if key in payload:
                        lo, hi = payload.pop(key)
                        pairs[f"{key}_range"] = (float(lo), float(hi))
                if payload:
                    raise ValueError(f"unknown key(s) in [camera]: {sorted(payload)}")
                updates["camera"] = replace(cfg.camera, **pairs)
            elif section == "landmark":
                style = {}
                if "radius_px" in payload:
                    style["radius_px"] = int(payload.pop("radius_px"))
                if "palette" in payload:
                    style["palette"] = {k: tuple(v) for k, v in payload.pop("palette").items()}
                if "polylines" in payload:
                    style["polylines"] = bool(payload.pop("polylines"))
                if "occlusion_eps" in payload:
                    style["occlusion_eps"] = float(payload.pop("occlusion_eps"))
                if payload:
                    raise ValueError(f"unknown key(s) in [landmark]: {sorted(payload)}")
                updates["landmark"] = replace(cfg.landmark, **style)
            elif section in _SECTION_FIELDS:
                attr = "field_cfg" if section == "field" else section
                updates[attr] = _apply_section(getattr(cfg, attr), _SECTION_FIELDS[section], payload, section)
            else:
                raise ValueError(f"unknown config section [{section}]")
        cfg = replace(cfg, **updates)

    endpoint = os.environ.get(ENDPOINT_ENV_VAR)
    if endpoint:
        cfg = replace(cfg, guidance=replace(cfg.guidance, endpoint=endpoint))
    return cfg
