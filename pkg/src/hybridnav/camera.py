"""Synthetic forward camera: raycast depth, flat-shaded RGB, min-pooling,
normalization and the calibrated depth-noise model.

Geometry exploits the 2.5D scene (vertical prisms over a ground plane viewed
by a horizontally mounted camera): every pixel column shares one azimuth, so
each surface needs a single 2D ray intersection per column; the per-pixel
range is the column's horizontal hit distance scaled by a precomputed
per-pixel factor, masked by the surface's height band.

Depth values are ranges along the ray (Euclidean distance to the hit),
clipped to the far plane; misses return the far value. Image column 0 looks
toward -y and the last column toward +y.
"""

from __future__ import annotations

import math

import numpy as np

from .config import CameraConfig, CourseConfig
from .errors import ConfigError, DataError
from .world import ObstacleBox

_SURFACE_SKY = 0
_SURFACE_GROUND = 1
_SURFACE_WALL = 2          # walls share one id; obstacles are 3 + index
_RGB_STREAM = 202


class CameraModel:
    """Pinhole camera with cached per-pixel ray geometry."""

    def __init__(self, cfg: CameraConfig):
        hfov = math.radians(cfg.hfov_deg)
        if not 0.0 < hfov < math.pi:
            raise ConfigError("horizontal FOV must lie in (0, pi)")
        self.cfg = cfg
        self.h = int(cfg.height)
        self.w = int(cfg.width)
        self.far = float(cfg.far)
        self.altitude = float(cfg.altitude)

        f = (self.w / 2.0) / math.tan(hfov / 2.0)
        u = np.arange(self.w) + 0.5 - self.w / 2.0          # +u looks toward +y
        v = self.h / 2.0 - (np.arange(self.h) + 0.5)        # +v looks up
        self.azimuth = np.arctan2(u, f)                     # per column
        n_h = np.hypot(f, u)                                # horizontal ray norm
        n_full = np.sqrt(n_h[None, :] ** 2 + v[:, None] ** 2)
        self.range_factor = n_full / n_h[None, :]           # range per meter of horizontal travel
        self.z_slope = v[:, None] / n_h[None, :]            # climb per meter of horizontal travel

        # Ground-plane ranges depend only on the fixed camera altitude.
        ground = np.full((self.h, self.w), np.inf)
        falling = self.z_slope < 0.0
        with np.errstate(divide="ignore"):
            t_h = np.where(falling, -self.altitude / np.where(falling, self.z_slope, -1.0), np.inf)
        ground = t_h * self.range_factor
        self.ground_range = np.where(falling & (ground <= self.far), ground, np.inf)


def _box_column_hits(origin, dirs, box: ObstacleBox) -> np.ndarray:
    """Horizontal entry distance per column ray into an oriented box (inf on miss)."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    ox = c * (origin[0] - box.cx) + s * (origin[1] - box.cy)
    oy = -s * (origin[0] - box.cx) + c * (origin[1] - box.cy)
    dx = c * dirs[:, 0] + s * dirs[:, 1]
    dy = -s * dirs[:, 0] + c * dirs[:, 1]
    t_near = np.full(dirs.shape[0], -np.inf)
    t_far = np.full(dirs.shape[0], np.inf)
    for o, d, half in ((ox, dx, box.half_depth), (oy, dy, box.half_width)):
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half - o) / d
            t2 = (half - o) / d
        lo = np.minimum(t1, t2)
        hi = np.maximum(t1, t2)
        parallel = np.abs(d) < 1e-15
        inside = np.abs(o) <= half
        lo = np.where(parallel, np.where(inside, -np.inf, np.inf), lo)
        hi = np.where(parallel, np.where(inside, np.inf, -np.inf), hi)
        t_near = np.maximum(t_near, lo)
        t_far = np.minimum(t_far, hi)
    entry = np.maximum(t_near, 0.0)
    hit = (t_far >= entry) & np.isfinite(entry)
    return np.where(hit, entry, np.inf)


def _wall_column_hits(origin, dirs, wall_y: float) -> np.ndarray:
    dy = dirs[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (wall_y - origin[1]) / dy
    return np.where((np.abs(dy) > 1e-15) & (t > 0.0), t, np.inf)


def _render(pose, obstacles, course: CourseConfig, cam: CameraModel):
    """Depth (meters) and surface-id maps for a pose (x, y, yaw)."""
    x0, y0, yaw = pose
    az = cam.azimuth + yaw
    dirs = np.stack([np.cos(az), np.sin(az)], axis=1)
    origin = (x0, y0)

    depth = np.where(np.isfinite(cam.ground_range), cam.ground_range, cam.far)
    sid = np.where(np.isfinite(cam.ground_range), _SURFACE_GROUND, _SURFACE_SKY)

    surfaces = []
    for wall_y in (-course.half_width, course.half_width):
        surfaces.append((_wall_column_hits(origin, dirs, wall_y),
                         cam.cfg.wall_height, _SURFACE_WALL))
    for k, box in enumerate(obstacles):
        surfaces.append((_box_column_hits(origin, dirs, box),
                         course.obstacle_height, 3 + k))

    for t_h, top, surface_id in surfaces:
        if not np.isfinite(t_h).any():
            continue
        rng_map = t_h[None, :] * cam.range_factor
        z_hit = cam.altitude + t_h[None, :] * cam.z_slope
        closer = (np.isfinite(t_h)[None, :] & (z_hit >= 0.0) & (z_hit <= top)
                  & (rng_map < depth))
        depth = np.where(closer, rng_map, depth)
        sid = np.where(closer, surface_id, sid)
    return depth, sid


def render_depth_full(pose, obstacles, course: CourseConfig, cam: CameraModel) -> np.ndarray:
    """Full-resolution depth map in meters, far-clipped."""
    depth, _ = _render(pose, obstacles, course, cam)
    return depth


def render_surface_ids(pose, obstacles, course: CourseConfig, cam: CameraModel) -> np.ndarray:
    """Per-pixel surface ids (0 sky, 1 ground, 2 wall, 3+k obstacle k)."""
    _, sid = _render(pose, obstacles, course, cam)
    return sid


def surface_palette(n_obstacles: int, seed: int) -> np.ndarray:
    """Seed-stable base colors: sky, ground, wall, then one per obstacle."""
    rng = np.random.default_rng([int(seed), _RGB_STREAM])
    fixed = np.array([
        [0.53, 0.78, 0.92],   # sky
        [0.42, 0.39, 0.35],   # ground
        [0.65, 0.63, 0.60],   # walls
    ])
    boxes = 0.25 + 0.65 * rng.random((n_obstacles, 3))
    return np.vstack([fixed, boxes])


def render_rgb(pose, obstacles, course: CourseConfig, cam: CameraModel,
               seed: int) -> np.ndarray:
    """Flat-shaded frame: per-surface base color, brightness falling off
    with range (sky excepted). Values in [0, 1]."""
    depth, sid = _render(pose, obstacles, course, cam)
    palette = surface_palette(len(obstacles), seed)
    img = palette[sid]
    atten = 1.0 - 0.72 * np.clip(depth, 0.0, cam.far) / cam.far
    atten = np.where(sid == _SURFACE_SKY, 1.0, atten)
    return img * atten[:, :, None]


def min_pool(full: np.ndarray, block: int = 16) -> np.ndarray:
    """Block-minimum downscale: conservative (closest range wins)."""
    h, w = full.shape
    if h % block or w % block:
        raise ConfigError(f"map {h}x{w} not divisible into {block}x{block} blocks")
    return full.reshape(h // block, block, w // block, block).min(axis=(1, 3))


def normalize(map_m: np.ndarray, far: float) -> np.ndarray:
    """Affine [0, far] -> [-1, 1]."""
    arr = np.asarray(map_m, dtype=np.float64)
    if arr.min() < -1e-9 or arr.max() > far + 1e-9:
        raise DataError("depth values outside [0, far] cannot be normalized")
    return 2.0 * arr / far - 1.0


def denormalize(map_norm: np.ndarray, far: float) -> np.ndarray:
    """Exact inverse of normalize."""
    return (np.asarray(map_norm, dtype=np.float64) + 1.0) * (far / 2.0)


def apply_depth_noise(map_norm: np.ndarray, sigma: float, rng) -> np.ndarray:
    """Additive per-cell Gaussian noise, clamped to the normalized range.

    With sigma = MAE * sqrt(pi/2) the unclamped noise has mean absolute value
    MAE, matching a target estimator error."""
    if sigma == 0.0:
        return np.asarray(map_norm, dtype=np.float64).copy()
    noisy = map_norm + rng.normal(0.0, sigma, size=np.shape(map_norm))
    return np.clip(noisy, -1.0, 1.0)


class ObservationChannel:
    """Produces the reduced depth observation for the controllers.

    Sources: raycast truth plus calibrated noise (default), clean truth, or a
    supplied depth-estimator callable run on the rendered RGB frame.
    """

    def __init__(self, cam: CameraModel, course: CourseConfig,
                 depth_sigma: float, kin_sigma: float = 0.0,
                 predictor=None, block: int = 16):
        self.cam = cam
        self.course = course
        self.depth_sigma = float(depth_sigma)
        self.kin_sigma = float(kin_sigma)
        self.predictor = predictor
        self.block = block

    def reduced_depth(self, world, rng) -> tuple[np.ndarray, np.ndarray]:
        """(normalized reduced map, same map in meters) at the current pose."""
        st = world.state
        pose = (st.x, st.y, st.yaw)
        if self.predictor is not None:
            img = render_rgb(pose, world.obstacles, self.course, self.cam,
                             seed=world.course.seed)
            norm = np.clip(self.predictor(img), -1.0, 1.0)
        else:
            full = render_depth_full(pose, world.obstacles, self.course, self.cam)
            norm = normalize(min_pool(full, self.block), self.cam.far)
            norm = apply_depth_noise(norm, self.depth_sigma, rng)
        return norm, denormalize(norm, self.cam.far)

    def policy_observation(self, world, rng) -> tuple[np.ndarray, np.ndarray]:
        """(160-vector for the networks, reduced map in meters)."""
        norm, meters = self.reduced_depth(world, rng)
        kin = world.kinematic_estimate(self.kin_sigma, rng if self.kin_sigma else None)
        return np.concatenate([norm.reshape(-1), kin]), meters
