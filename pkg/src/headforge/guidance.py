"""Score guidance: prompts, the provider interface, CFG, IESD, SDS assembly.

A score provider turns a request (render + conditioning) into an image-space
gradient w(t) * (eps_hat - eps) with the encoder Jacobian already applied, so
the optimizer stays independent of any pretrained-model ecosystem. The local
provider works in pixel space (identity encoder) around a pluggable noise
predictor; the mock predictor is the closed-form test oracle. The remote
provider speaks the JSON-over-HTTP wire protocol (version "1").
"""

from __future__ import annotations

import base64
import enum
import io
import time
from dataclasses import dataclass, replace

import numpy as np

from .camera import ViewBucket
from .errors import (
    PoisonedGradientError,
    ProtocolVersionError,
    ShapeError,
    TransportError,
)
from .schedule import DiffusionSchedule, add_noise, sample_timestep, sds_weight

PROTOCOL_VERSION = "1"


class GuidanceMode(enum.Enum):
    GENERATE = "generate"
    EDIT = "edit"


@dataclass(frozen=True)
class PromptSet:
    base_prompt: str
    edit_instruction: str | None = None
    suffix_front: str = "front view"
    suffix_side: str = "side view"
    back_token: str = "<back-view>"  # learned token consumed as an opaque string

    def __post_init__(self):
        if not self.base_prompt:
            raise ValueError("base_prompt must be non-empty")


@dataclass(frozen=True)
class GuidanceConfig:
    cfg_scale: float = 100.0
    edit_scale: float = 0.6
    t_range: tuple[float, float] = (0.02, 0.98)
    mode: GuidanceMode = GuidanceMode.GENERATE

    def __post_init__(self):
        if not 0.0 <= self.edit_scale <= 1.0:
            raise ValueError("edit_scale must be in [0, 1]")
        if self.cfg_scale < 1.0:
            raise ValueError("cfg_scale must be >= 1")


@dataclass
class ScoreRequest:
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    prompt: str
    unconditional: bool = False
    instruction: str | None = None
    timestep: int = 0
    noise_seed: int = 0
    landmark_map: np.ndarray | None = None  # (H, W, 3) uint8
    reference_image: np.ndarray | None = None  # (H, W, 3) float in [0, 1]

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.ndim != 3 or self.image.shape[-1] != 3:
            raise ShapeError(f"image must be (H, W, 3), got {self.image.shape}")
        if not np.isfinite(self.image).all():
            raise ValueError("request image contains non-finite values")
        for name in ("landmark_map", "reference_image"):
            arr = getattr(self, name)
            if arr is not None and arr.shape[:2] != self.image.shape[:2]:
                raise ShapeError(f"{name} resolution {arr.shape[:2]} != image {self.image.shape[:2]}")


@dataclass
class ImageGradient:
    data: np.ndarray  # (H, W, 3): w(t) * (eps_hat - eps) * dz/dx
    w_t: float

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)


def assemble_prompt(prompts: PromptSet, bucket: ViewBucket) -> str:
    """'{base}, {suffix}' with the suffix chosen by view bucket."""
    suffix = {
        ViewBucket.FRONT: prompts.suffix_front,
        ViewBucket.SIDE: prompts.suffix_side,
        ViewBucket.BACK: prompts.back_token,
    }[bucket]
    return f"{prompts.base_prompt}, {suffix}" if suffix else prompts.base_prompt


# ---------------------------------------------------------------------------
# Score algebra


def cfg_combine(eps_uncond: np.ndarray, eps_cond: np.ndarray, scale: float) -> np.ndarray:
    if eps_uncond.shape != eps_cond.shape:
        raise ShapeError("eps shapes disagree")
    return eps_uncond + scale * (eps_cond - eps_uncond)


def iesd_blend(eps_edit: np.ndarray, eps_orig: np.ndarray, edit_scale: float) -> np.ndarray:
    """edit_scale * eps_edit + (1 - edit_scale) * eps_orig."""
    if eps_edit.shape != eps_orig.shape:
        raise ShapeError("eps shapes disagree")
    if not 0.0 <= edit_scale <= 1.0:
        raise ValueError("edit_scale must be in [0, 1]")
    return edit_scale * eps_edit + (1.0 - edit_scale) * eps_orig


def _seeded_noise(shape, seed: int) -> np.ndarray:
    return np.random.default_rng(np.random.PCG64(seed)).standard_normal(shape)


def mock_score(target: np.ndarray, request: ScoreRequest, schedule: DiffusionSchedule) -> np.ndarray:
    """Deterministic oracle predictor: the noise that exactly denoises toward
    `target`, eps_hat = (z_t - sqrt(ab) * target) / sqrt(1 - ab), so that
    eps_hat - eps = sqrt(ab / (1 - ab)) * (z - target) independent of eps.
    """
    target = np.asarray(target, dtype=np.float64)
    if target.shape != request.image.shape:
        raise ShapeError(f"target shape {target.shape} != image shape {request.image.shape}")
    eps = _seeded_noise(request.image.shape, request.noise_seed)
    z_t = add_noise(schedule, request.image, eps, request.timestep)
    ab = schedule.alpha_bar[request.timestep]
    return (z_t - np.sqrt(ab) * target) / np.sqrt(1.0 - ab)


class MockNoisePredictor:
    """Predicts noise toward a fixed target image regardless of the prompt."""

    def __init__(self, target: np.ndarray, schedule: DiffusionSchedule):
        self.target = np.asarray(target, dtype=np.float64)
        self.schedule = schedule

    def predict(self, request: ScoreRequest) -> np.ndarray:
        return mock_score(self.target, request, self.schedule)


# ---------------------------------------------------------------------------
# Providers


class LocalScoreProvider:
    """Assembles the SDS image gradient from a pixel-space noise predictor.

    The encoder Jacobian is the identity here. Per view this issues one
    unconditional prediction plus one conditioned prediction (generate) or two
    conditioned predictions that are CFG'd independently and blended by the
    edit scale (edit).
    """

    def __init__(self, predictor, schedule: DiffusionSchedule):
        self.predictor = predictor
        self.schedule = schedule

    def score(self, request: ScoreRequest, config: GuidanceConfig) -> ImageGradient:
        eps = _seeded_noise(request.image.shape, request.noise_seed)
        w_t = sds_weight(self.schedule, request.timestep)

        uncond = replace(request, prompt="", instruction=None, unconditional=True)
        eps_u = self.predictor.predict(uncond)
        if config.mode is GuidanceMode.GENERATE:
            eps_c = self.predictor.predict(replace(request, unconditional=False, instruction=None))
            combined = cfg_combine(eps_u, eps_c, config.cfg_scale)
        else:
            if request.instruction is None:
                raise ValueError("edit mode requires an instruction")
            eps_edit = self.predictor.predict(replace(request, unconditional=False))
            eps_desc = self.predictor.predict(replace(request, unconditional=False, instruction=None))
            combined = iesd_blend(
                cfg_combine(eps_u, eps_edit, config.cfg_scale),
                cfg_combine(eps_u, eps_desc, config.cfg_scale),
                config.edit_scale,
            )
        return ImageGradient(w_t * (combined - eps), w_t)


def encode_f32_b64(arr: np.ndarray) -> dict:
    data = np.ascontiguousarray(arr, dtype="<f4")
    return {"shape": list(arr.shape), "data_b64": base64.b64encode(data.tobytes()).decode("ascii")}


def decode_f32_b64(payload: dict) -> np.ndarray:
    raw = base64.b64decode(payload["data_b64"])
    return np.frombuffer(raw, dtype="<f4").reshape(payload["shape"]).astype(np.float64)


def encode_png_b64(image: np.ndarray | None) -> str | None:
    if image is None:
        return None
    from PIL import Image

    arr = image if image.dtype == np.uint8 else np.clip(image * 255.0 + 0.5, 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


class RemoteScoreProvider:
    """HTTP client for the wire protocol; idempotent per (request, seed)."""

    def __init__(self, endpoint: str, client=None, max_attempts: int = 3, backoff_s: float = 0.5):
        import httpx

        self.endpoint = endpoint.rstrip("/")
        self.client = client or httpx.Client(timeout=60.0)
        self.max_attempts = max_attempts
        self.backoff_s = backoff_s
        self._handshaken = False

    def health_check(self) -> dict:
        payload = self._request("GET", "/health")
        if payload.get("protocol") != PROTOCOL_VERSION:
            raise ProtocolVersionError(
                f"provider speaks protocol {payload.get('protocol')!r}, need {PROTOCOL_VERSION!r}"
            )
        self._handshaken = True
        return payload

    def score(self, request: ScoreRequest, config: GuidanceConfig) -> ImageGradient:
        if not self._handshaken:
            self.health_check()
        body = {
            "mode": config.mode.value,
            "image": encode_f32_b64(request.image),
            "prompt": request.prompt,
            "instruction": request.instruction,
            "timestep": int(request.timestep),
            "noise_seed": int(request.noise_seed),
            "cfg_scale": float(config.cfg_scale),
            "edit_scale": float(config.edit_scale),
            "landmark_png_b64": encode_png_b64(request.landmark_map),
            "reference_png_b64": encode_png_b64(request.reference_image),
        }
        payload = self._request("POST", "/score", body)
        grad = decode_f32_b64(payload["gradient"])
        if grad.shape != request.image.shape:
            raise ShapeError(f"provider returned shape {grad.shape}, expected {request.image.shape}")
        return ImageGradient(grad, float(payload["w_t"]))

    def _request(self, method: str, path: str, body: dict | None = None) -> dict:
        import httpx

        last_error = None
        for attempt in range(self.max_attempts):
            try:
                resp = self.client.request(method, self.endpoint + path, json=body)
                if resp.status_code >= 500:
                    raise TransportError(f"{path} -> HTTP {resp.status_code}")
                resp.raise_for_status()
                return resp.json()
            except (httpx.TransportError, TransportError) as exc:
                last_error = exc
                if attempt + 1 < self.max_attempts:
                    time.sleep(self.backoff_s * 2**attempt)
            except httpx.HTTPStatusError as exc:
                raise TransportError(f"{path} -> {exc}") from exc
        raise TransportError(f"provider unreachable after {self.max_attempts} attempts: {last_error}")


# ---------------------------------------------------------------------------
# SDS step


def sds_step(
    provider,
    image: np.ndarray,
    prompts: PromptSet,
    bucket: ViewBucket,
    config: GuidanceConfig,
    schedule: DiffusionSchedule,
    rng: np.random.Generator,
    landmark_map: np.ndarray | None = None,
    reference_image: np.ndarray | None = None,
) -> ImageGradient:
    """One score-distillation step for one view: sample t, query the provider,
    and return the image-space gradient to inject into the render backward.
    """
    t = sample_timestep(schedule, config.t_range, rng)
    noise_seed = int(rng.integers(0, 2**63 - 1))
    request = ScoreRequest(
        image=image,
        prompt=assemble_prompt(prompts, bucket),
        instruction=prompts.edit_instruction if config.mode is GuidanceMode.EDIT else None,
        timestep=t,
        noise_seed=noise_seed,
        landmark_map=landmark_map,
        reference_image=reference_image,
    )
    grad = provider.score(request, config)
    if not np.isfinite(grad.data).all():
        raise PoisonedGradientError("provider returned a non-finite gradient")
    return grad
