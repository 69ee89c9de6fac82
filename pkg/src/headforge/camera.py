"""Training cameras: pose sampling, rays, projection, landmark maps, view buckets.

World convention: y up, head faces +z. A pose is spherical around `look_at`
(azimuth around y with 0 = in front of the face, polar angle from +y). `fov`
is the vertical field of view in degrees.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .head_prior import HeadMesh, ray_mesh_first_hit


@dataclass(frozen=True)
class CameraPose:
    azimuth: float  # degrees in [0, 360)
    polar_theta: float  # degrees from +y
    radius: float
    fov: float  # degrees, vertical
    look_at: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if not (0.0 < self.fov < 180.0):
            raise ValueError("fov must be in (0, 180)")
        object.__setattr__(self, "look_at", np.asarray(self.look_at, dtype=np.float64))

    @property
    def eye(self) -> np.ndarray:
        az = math.radians(self.azimuth)
        th = math.radians(self.polar_theta)
        offset = np.array(
            [math.sin(th) * math.sin(az), math.cos(th), math.sin(th) * math.cos(az)]
        )
        return self.look_at + self.radius * offset

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Orthonormal (right, up, forward); forward points at look_at."""
        forward = self.look_at - self.eye
        forward = forward / np.linalg.norm(forward)
        world_up = np.array([0.0, 1.0, 0.0])
        right = np.cross(forward, world_up)
        nr = np.linalg.norm(right)
        if nr < 1e-9:  # looking straight up/down
            right = np.array([1.0, 0.0, 0.0])
        else:
            right = right / nr
        up = np.cross(right, forward)
        return right, up, forward

    def focal_px(self, height: int) -> float:
        return 0.5 * height / math.tan(math.radians(self.fov) / 2.0)


@dataclass(frozen=True)
class CameraRanges:
    theta_range: tuple[float, float] = (20.0, 110.0)
    radius_range: tuple[float, float] = (1.0, 1.5)
    fov_range: tuple[float, float] = (30.0, 50.0)

    def __post_init__(self):
        for name in ("theta_range", "radius_range", "fov_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must satisfy lo <= hi, got ({lo}, {hi})")


class ViewBucket(enum.Enum):
    FRONT = "front"
    SIDE = "side"
    BACK = "back"


def sample_pose(ranges: CameraRanges, rng: np.random.Generator, look_at=None) -> CameraPose:
    """Azimuth uniform on the circle; theta/radius/fov uniform in their ranges."""
    az = rng.uniform(0.0, 360.0)
    th = rng.uniform(*ranges.theta_range)
    r = rng.uniform(*ranges.radius_range)
    fov = rng.uniform(*ranges.fov_range)
    return CameraPose(az, th, r, fov, np.zeros(3) if look_at is None else look_at)


def view_bucket(azimuth: float) -> ViewBucket:
    """Bucket boundaries at 45/135 degrees, ties going to SIDE."""
    az = azimuth % 360.0
    if az > 180.0:
        az -= 360.0
    if abs(az) < 45.0:
        return ViewBucket.FRONT
    if abs(az) <= 135.0:
        return ViewBucket.SIDE
    return ViewBucket.BACK


def generate_rays(pose: CameraPose, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """One ray per pixel center: origins (H, W, 3), unit directions (H, W, 3)."""
    if width < 1 or height < 1:
        raise ValueError("image dimensions must be >= 1")
    right, up, forward = pose.basis()
    f = pose.focal_px(height)
    u = (np.arange(width) + 0.5 - width / 2.0) / f
    v = -(np.arange(height) + 0.5 - height / 2.0) / f
    uu, vv = np.meshgrid(u, v)
    dirs = uu[..., None] * right + vv[..., None] * up + forward
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.eye, dirs.shape).copy()
    return origins, dirs


def project_points(
    pose: CameraPose, points: np.ndarray, width: int, height: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Perspective projection to continuous pixel coordinates.

    Returns (uv (N, 2), depth (N,), visible (N,)). `uv` has the image center
    at (width/2, height/2); `depth` is distance along the optical axis and
    `visible` is False behind the camera plane.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    right, up, forward = pose.basis()
    q = pts - pose.eye
    x = q @ right
    y = q @ up
    z = q @ forward
    visible = z > 1e-9
    f = pose.focal_px(height)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = width / 2.0 + f * x / z
        v = height / 2.0 - f * y / z
    uv = np.stack([u, v], axis=-1)
    return uv, z, visible


DEFAULT_PALETTE = {
    "contour": (230, 230, 230),
    "brows": (0, 200, 255),
    "eyes": (0, 255, 80),
    "nose": (255, 80, 40),
    "mouth": (255, 220, 0),
}
_FALLBACK_COLORS = [(255, 0, 255), (0, 128, 255), (128, 255, 0), (255, 128, 0)]


@dataclass(frozen=True)
class LandmarkStyle:
    radius_px: int | None = None  # None -> max(1, width // 128)
    palette: dict = field(default_factory=lambda: dict(DEFAULT_PALETTE))
    polylines: bool = True
    occlusion_eps: float = 0.01

    def disc_radius(self, width: int) -> int:
        return self.radius_px if self.radius_px is not None else max(1, width // 128)

    def color_for(self, group: str, index: int) -> tuple[int, int, int]:
        return self.palette.get(group, _FALLBACK_COLORS[index % len(_FALLBACK_COLORS)])


def _stamp_disc(img: np.ndarray, u: float, v: float, radius: int, color) -> None:
    h, w = img.shape[:2]
    x0 = max(0, int(math.floor(u - radius - 1)))
    x1 = min(w, int(math.ceil(u + radius + 1)))
    y0 = max(0, int(math.floor(v - radius - 1)))
    y1 = min(h, int(math.ceil(v + radius + 1)))
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    mask = (xs + 0.5 - u) ** 2 + (ys + 0.5 - v) ** 2 <= radius**2
    img[y0:y1, x0:x1][mask] = color


def _stamp_segment(img: np.ndarray, p0, p1, color) -> None:
    h, w = img.shape[:2]
    n = max(2, int(np.linalg.norm(np.subtract(p1, p0)) * 2))
    for t in np.linspace(0.0, 1.0, n):
        x = int(math.floor(p0[0] + t * (p1[0] - p0[0])))
        y = int(math.floor(p0[1] + t * (p1[1] - p0[1])))
        if 0 <= x < w and 0 <= y < h:
            img[y, x] = color


def render_landmark_map(
    mesh: HeadMesh,
    pose: CameraPose,
    style: LandmarkStyle,
    width: int,
    height: int,
) -> np.ndarray:
    """Draw visible landmarks as filled discs (plus in-group polylines) on black.

    A landmark is omitted when behind the camera or when the prior surface
    occludes it (first ray hit closer than the landmark by > occlusion_eps).
    """
    img = np.zeros((height, width, 3), dtype=np.uint8)
    radius = style.disc_radius(width)
    for gi, (group, idx) in enumerate(mesh.landmark_groups.items()):
        if idx.size == 0:
            continue
        pts = mesh.vertices[idx]
        uv, _, front = project_points(pose, pts, width, height)
        dirs = pts - pose.eye
        dist = np.linalg.norm(dirs, axis=1)
        t_hit = ray_mesh_first_hit(mesh, np.broadcast_to(pose.eye, pts.shape), dirs / dist[:, None])
        visible = front & (t_hit >= dist - style.occlusion_eps)
        color = style.color_for(group, gi)
        if style.polylines:
            dim = tuple(int(c * 0.5) for c in color)
            for k in range(len(idx) - 1):
                if visible[k] and visible[k + 1]:
                    _stamp_segment(img, uv[k], uv[k + 1], dim)
        for k in range(len(idx)):
            if visible[k]:
                _stamp_disc(img, uv[k, 0], uv[k, 1], radius, color)
    return img
