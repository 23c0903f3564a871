"""Pinhole cameras: projection, ray generation, and rig builders.

Convention: world-to-camera rigid transform, camera looks along +z,
pixel u = fx*x/z + cx, v = fy*y/z + cy.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Array = np.ndarray


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: Array   # (3, 3) world-to-camera
    translation: Array  # (3,)
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if np.max(np.abs(self.rotation @ self.rotation.T - np.eye(3))) > 1e-6:
            raise ValueError("rotation not orthonormal")

    @property
    def world_to_cam(self) -> Array:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def position(self) -> Array:
        return -self.rotation.T @ self.translation

    def cam_coords(self, pts: Array) -> Array:
        pts = np.atleast_2d(pts)
        return pts @ self.rotation.T + self.translation

    def project(self, pts: Array):
        """World points -> (pixel uv, camera z)."""
        pc = self.cam_coords(pts)
        z = pc[:, 2]
        u = self.fx * pc[:, 0] / z + self.cx
        v = self.fy * pc[:, 1] / z + self.cy
        return np.column_stack([u, v]), z

    def pixel_rays(self, u: Array, v: Array):
        """Pixel centers -> world (origins, unit directions)."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        d = np.stack([
            (u - self.cx) / self.fx,
            (v - self.cy) / self.fy,
            np.ones_like(u),
        ], axis=-1)
        d = d @ self.rotation  # R^T applied to each row
        d = d / np.linalg.norm(d, axis=-1, keepdims=True)
        o = np.broadcast_to(self.position, d.shape)
        return o.copy(), d

    def to_dict(self) -> dict:
        return {
            "intrinsics": [self.fx, self.fy, self.cx, self.cy],
            "world_to_cam": self.world_to_cam.reshape(-1).tolist(),
            "size": [self.width, self.height],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        fx, fy, cx, cy = d["intrinsics"]
        m = np.asarray(d["world_to_cam"], dtype=np.float64).reshape(4, 4)
        w, h = d["size"]
        return cls(fx, fy, cx, cy, m[:3, :3], m[:3, 3], int(w), int(h))


def look_at(eye, target, up, fov_deg: float, width: int, height: int) -> Camera:
    """Camera at `eye` looking at `target`; fov is vertical."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    n = np.linalg.norm(right)
    if n < 1e-9:
        up = np.array([0.0, 1.0, 0.0]) if abs(fwd[2]) > 0.9 else np.array([0.0, 0.0, 1.0])
        right = np.cross(fwd, up)
        n = np.linalg.norm(right)
    right = right / n
    down = np.cross(fwd, right)  # +y in image points down rows
    R = np.stack([right, down, fwd])
    t = -R @ eye
    f = 0.5 * height / np.tan(np.radians(fov_deg) / 2.0)
    return Camera(f, f, width / 2.0, height / 2.0, R, t, width, height)


def ring_cameras(center, radius: float, count: int, elevation_deg: float,
                 fov_deg: float, width: int, height: int,
                 phase: float = 0.0) -> list:
    """Evenly spaced cameras on an elevation ring, all looking at `center`."""
    center = np.asarray(center, dtype=np.float64)
    el = np.radians(elevation_deg)
    cams = []
    for k in range(count):
        az = phase + 2.0 * np.pi * k / count
        eye = center + radius * np.array([
            np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)
        ])
        cams.append(look_at(eye, center, np.array([0.0, 0.0, 1.0]),
                            fov_deg, width, height))
    return cams


def top_cameras(center, radius: float, count: int = 4,
                elevation_deg: float = 60.0, fov_deg: float = 45.0,
                width: int = 512, height: int = 512) -> list:
    """Synthetic high-elevation cameras appended for visibility selection."""
    return ring_cameras(center, radius, count, elevation_deg, fov_deg,
                        width, height, phase=np.pi / count)
