"""View-space camera system.

All instances share one input pose: a camera on a radius-2.7 sphere looking
at the world origin, with small fixed intrinsics (normalized focal 5.4,
principal point 0.5).  Novel views are sampled as azimuth/polar offsets on
the same sphere, re-oriented to look at the origin.  Ray samples are placed
uniformly in disparity (inverse depth) between the near and far planes.

Conventions: image coordinates are normalized to [0,1], rays go through
pixel centers, camera frame is x-right / y-down / z-forward, rotation maps
camera coordinates to world coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RADIUS = 2.7
FOCAL = 5.4
PRINCIPAL = 0.5
NEAR = 2.25
FAR = 5.0
YAW_RANGE_DEG = 35.0
PITCH_RANGE_DEG = 15.0
WORLD_UP = np.array([0.0, 1.0, 0.0])


@dataclass
class CameraPose:
    rotation: np.ndarray     # 3x3, camera-to-world
    translation: np.ndarray  # camera center in world units

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(3), atol=1e-9):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(self.rotation) - 1.0) > 1e-9:
            raise ValueError("rotation determinant is not +1")


@dataclass
class Intrinsics:
    matrix: np.ndarray  # 3x3, normalized focal lengths and principal point

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if not np.array_equal(self.matrix[2], [0.0, 0.0, 1.0]):
            raise ValueError("intrinsics lower row must be (0, 0, 1)")

    @property
    def fx(self):
        return self.matrix[0, 0]

    @property
    def fy(self):
        return self.matrix[1, 1]

    @property
    def cx(self):
        return self.matrix[0, 2]

    @property
    def cy(self):
        return self.matrix[1, 2]


@dataclass
class RayBundle:
    origins: np.ndarray     # (P, 3)
    directions: np.ndarray  # (P, 3), unit norm
    near: float
    far: float
    resolution: tuple[int, int]


@dataclass
class RaySampleSet:
    depths: np.ndarray  # (N,) strictly increasing, equally spaced in 1/t
    deltas: np.ndarray  # (N-1,) forward differences

    @property
    def count(self):
        return self.depths.shape[0]


def default_camera(radius: float = RADIUS, focal: float = FOCAL,
                   principal: float = PRINCIPAL) -> tuple[CameraPose, Intrinsics]:
    rot = np.diag([1.0, -1.0, -1.0])
    pose = CameraPose(rot, np.array([0.0, 0.0, radius]))
    intr = Intrinsics(np.array([[focal, 0.0, principal],
                                [0.0, focal, principal],
                                [0.0, 0.0, 1.0]]))
    return pose, intr


def look_at_origin(center: np.ndarray) -> CameraPose:
    """Pose at ``center`` whose principal ray passes through the origin."""
    center = np.asarray(center, dtype=np.float64)
    fwd = -center / np.linalg.norm(center)
    x = np.cross(fwd, WORLD_UP)
    nx = np.linalg.norm(x)
    if nx < 1e-12:
        raise ValueError("camera center is aligned with the up axis")
    x = x / nx
    y = np.cross(fwd, x)
    rot = np.stack([x, y, fwd], axis=1)
    return CameraPose(rot, center)


def _sphere_point(azimuth_rad: float, polar_rad: float, radius: float) -> np.ndarray:
    cp = np.cos(polar_rad)
    return radius * np.array([np.sin(azimuth_rad) * cp,
                              np.sin(polar_rad),
                              np.cos(azimuth_rad) * cp])


def sample_novel_pose(rng: np.random.Generator,
                      azimuth_range_deg: float = YAW_RANGE_DEG,
                      polar_range_deg: float = PITCH_RANGE_DEG,
                      radius: float = RADIUS) -> CameraPose:
    """Uniform azimuth/polar offsets around the input pose, re-aimed at origin."""
    if abs(azimuth_range_deg) > 90.0 or abs(polar_range_deg) > 90.0:
        raise ValueError("angle ranges beyond +-90 degrees are rejected")
    az = np.deg2rad(rng.uniform(-azimuth_range_deg, azimuth_range_deg))
    pol = np.deg2rad(rng.uniform(-polar_range_deg, polar_range_deg))
    return pose_from_angles(az, pol, radius)


def sample_eval_pose(rng: np.random.Generator,
                     sigma_yaw_rad: float = 0.3,
                     sigma_pitch_rad: float = 0.15,
                     radius: float = RADIUS) -> CameraPose:
    """Gaussian pose jitter used by the evaluation protocol."""
    az = np.clip(rng.normal(0.0, sigma_yaw_rad), -np.pi / 2 + 1e-3,
                 np.pi / 2 - 1e-3)
    pol = np.clip(rng.normal(0.0, sigma_pitch_rad), -np.pi / 2 + 1e-3,
                  np.pi / 2 - 1e-3)
    return pose_from_angles(az, pol, radius)


def pose_from_angles(azimuth_rad: float, polar_rad: float,
                     radius: float = RADIUS) -> CameraPose:
    if azimuth_rad == 0.0 and polar_rad == 0.0:
        return default_camera(radius=radius)[0]
    return look_at_origin(_sphere_point(azimuth_rad, polar_rad, radius))


def pixel_direction(pose: CameraPose, intr: Intrinsics,
                    u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """World-space unit ray direction through normalized image point (u, v)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = np.stack([(u - intr.cx) / intr.fx,
                  (v - intr.cy) / intr.fy,
                  np.ones_like(u)], axis=-1)
    d = d @ pose.rotation.T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def cast_rays(pose: CameraPose, intr: Intrinsics,
              resolution: int | tuple[int, int],
              near: float = NEAR, far: float = FAR) -> RayBundle:
    """One ray per pixel center, row-major over (row, col)."""
    if isinstance(resolution, int):
        h = w = resolution
    else:
        h, w = resolution
    if h < 1 or w < 1:
        raise ValueError("resolution must be >= 1")
    v = (np.arange(h) + 0.5) / h
    u = (np.arange(w) + 0.5) / w
    V, U = np.meshgrid(v, u, indexing="ij")
    dirs = pixel_direction(pose, intr, U.ravel(), V.ravel())
    origins = np.broadcast_to(pose.translation, dirs.shape).copy()
    return RayBundle(origins, dirs, near, far, (h, w))


def sample_disparity(bundle: RayBundle, n: int,
                     jitter: bool = False,
                     rng: np.random.Generator | None = None) -> RaySampleSet:
    """Depths with 1/t spaced uniformly between 1/near and 1/far.

    Stratified jitter within disparity bins is off by default; with it on,
    depths remain shared across rays (one draw per bin).
    """
    if n < 2:
        raise ValueError("need at least 2 samples per ray")
    frac = np.arange(n) / (n - 1)
    if jitter:
        if rng is None:
            raise ValueError("jitter requires an rng")
        width = 1.0 / (n - 1)
        frac = frac + np.concatenate([
            rng.uniform(-0.5, 0.5, size=n - 1), [0.0]]) * width
        frac = np.clip(frac, 0.0, 1.0)
        frac.sort()
    disp = (1.0 / bundle.near) + frac * (1.0 / bundle.far - 1.0 / bundle.near)
    depths = 1.0 / disp
    return RaySampleSet(depths, np.diff(depths))
