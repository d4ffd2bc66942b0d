"""Pinhole cameras and hemisphere pose sampling.

Convention: camera-to-world rotation R with columns (x right, y down,
z forward), OpenCV-style; world z is up. A pixel (u, v) maps to the camera-
frame direction ((u - cx)/fx, (v - cy)/fy, 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ORTHONORMAL_TOL = 1e-9


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # (3, 3) camera-to-world
    position: np.ndarray  # (3,) camera origin in world

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal length must be positive")
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.position = np.asarray(self.position, dtype=np.float64)
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > ORTHONORMAL_TOL:
            raise ValueError(f"rotation is not orthonormal (max deviation {err:.3e})")

    @property
    def optical_axis(self) -> np.ndarray:
        return self.rotation[:, 2]

    def c2w_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.position
        return m

    @classmethod
    def from_c2w(cls, fx, fy, cx, cy, width, height, c2w) -> "Camera":
        c2w = np.asarray(c2w, dtype=np.float64)
        return cls(fx, fy, cx, cy, width, height, c2w[:3, :3], c2w[:3, 3])


def look_at_rotation(origin, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world rotation whose +z axis points from origin to target."""
    forward = np.asarray(target, dtype=np.float64) - np.asarray(origin, dtype=np.float64)
    norm = np.linalg.norm(forward)
    if norm == 0:
        raise ValueError("origin and target coincide")
    z = forward / norm
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-8:
        # looking straight along up; any horizontal right vector works
        x = np.cross(z, np.array([1.0, 0.0, 0.0]))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def look_at_camera(origin, target, focal_px, width, height, up=(0.0, 0.0, 1.0)) -> Camera:
    return Camera(
        fx=float(focal_px),
        fy=float(focal_px),
        cx=width / 2.0,
        cy=height / 2.0,
        width=int(width),
        height=int(height),
        rotation=look_at_rotation(origin, target, up),
        position=np.asarray(origin, dtype=np.float64),
    )


def sample_hemisphere_cameras(n, radius, look_at, seed, width=256, height=256,
                              focal_px=None, elevation_deg=(2.0, 72.0)) -> list[Camera]:
    """Sample n poses on the upper hemisphere around `look_at`, all aimed at it.

    Per-camera RNG streams are derived from (seed, index), so camera i is
    identical for any n >= i+1 (prefix-stable; frame-count sweeps reuse
    renders of the largest set).
    """
    if n < 1:
        raise ValueError("need at least one camera")
    if radius <= 0:
        raise ValueError("radius must be positive")
    look_at = np.asarray(look_at, dtype=np.float64)
    if focal_px is None:
        focal_px = 1.2 * width
    lo_el, hi_el = np.deg2rad(elevation_deg[0]), np.deg2rad(elevation_deg[1])
    if lo_el < 0:
        raise ValueError("hemisphere sampling requires nonnegative elevation")
    cams = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence((int(seed), int(i))))
        azimuth = rng.uniform(0.0, 2.0 * np.pi)
        # uniform in sin(elevation) = uniform area on the sphere band
        sin_el = rng.uniform(np.sin(lo_el), np.sin(hi_el))
        cos_el = np.sqrt(1.0 - sin_el * sin_el)
        offset = radius * np.array(
            [cos_el * np.cos(azimuth), cos_el * np.sin(azimuth), sin_el]
        )
        cams.append(look_at_camera(look_at + offset, look_at, focal_px, width, height))
    return cams
