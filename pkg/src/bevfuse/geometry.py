"""Coordinate frames, pinhole cameras and BEV grid indexing.

Conventions (used everywhere in the package):

* ego frame: +x forward, +y left, +z up (meters)
* camera frame: +z forward, +x right, +y down
* yaw is measured about +z starting from +x

Geometry is computed in float64; feature tensors elsewhere are float32.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np


class GeometryError(ValueError):
    """Invalid geometric argument (bad depth, degenerate pose, ...)."""


class Point3(NamedTuple):
    x: float
    y: float
    z: float


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    # camera -> ego rigid transform
    pose: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        pose = np.array(self.pose, dtype=np.float64)
        if pose.shape != (4, 4):
            raise GeometryError(f"pose must be 4x4, got {pose.shape}")
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise GeometryError("image size must be positive")
        rot = pose[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(rot) - 1.0) > 1e-6:
            raise GeometryError("pose rotation must be orthonormal with det +1")
        pose.setflags(write=False)
        object.__setattr__(self, "pose", pose)

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.pose[:3, 3]

    def pixel_rays(self) -> np.ndarray:
        """Camera-frame ray directions (z = 1) through every pixel center, shape (H, W, 3)."""
        u = np.arange(self.width, dtype=np.float64) + 0.5
        v = np.arange(self.height, dtype=np.float64) + 0.5
        uu, vv = np.meshgrid(u, v)
        return np.stack([(uu - self.cx) / self.fx, (vv - self.cy) / self.fy, np.ones_like(uu)], axis=-1)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "pose": self.pose.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]),
                   np.asarray(d["pose"], dtype=np.float64))


def yaw_camera_pose(yaw: float, mount: Sequence[float] = (0.0, 0.0, 1.5)) -> np.ndarray:
    """Camera->ego pose for a level camera looking along ego yaw ``yaw``."""
    c, s = math.cos(yaw), math.sin(yaw)
    pose = np.eye(4)
    # columns: camera x (right), y (down), z (forward) expressed in ego
    pose[:3, 0] = (s, -c, 0.0)
    pose[:3, 1] = (0.0, 0.0, -1.0)
    pose[:3, 2] = (c, s, 0.0)
    pose[:3, 3] = mount
    return pose


def surround_rig(yaws: Sequence[float], width: int, height: int, hfov: float,
                 mount_height: float = 1.5) -> list[CameraModel]:
    """Ring of identical level cameras, one per yaw."""
    fx = (width / 2.0) / math.tan(hfov / 2.0)
    return [
        CameraModel(fx, fx, width / 2.0, height / 2.0, width, height,
                    yaw_camera_pose(y, (0.0, 0.0, mount_height)))
        for y in yaws
    ]


def unproject_pixel(cam: CameraModel, u: float, v: float, depth: float) -> Point3:
    if not depth > 0:
        raise GeometryError(f"depth must be positive, got {depth}")
    if not (0 <= u <= cam.width and 0 <= v <= cam.height):
        raise GeometryError(f"pixel ({u}, {v}) outside {cam.width}x{cam.height} image")
    p_cam = depth * np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
    p = cam.rotation @ p_cam + cam.translation
    return Point3(float(p[0]), float(p[1]), float(p[2]))


def project_point(cam: CameraModel, p: Sequence[float]) -> tuple[float, float, float]:
    """Inverse of :func:`unproject_pixel`: ego point -> (u, v, depth)."""
    p_cam = cam.rotation.T @ (np.asarray(p, dtype=np.float64) - cam.translation)
    d = p_cam[2]
    return (float(cam.fx * p_cam[0] / d + cam.cx), float(cam.fy * p_cam[1] / d + cam.cy), float(d))


def unproject_rays(cam: CameraModel, depths: np.ndarray) -> np.ndarray:
    """Ego-frame points for every pixel center at every depth: (H, W, D, 3)."""
    rays = cam.pixel_rays()
    p_cam = rays[:, :, None, :] * np.asarray(depths, dtype=np.float64)[None, None, :, None]
    return p_cam @ cam.rotation.T + cam.translation


@dataclass(frozen=True)
class BEVGridSpec:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    z_min: float
    z_max: float
    cell_xy: float
    z_bins: int

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min and self.z_max > self.z_min):
            raise GeometryError("grid bounds must satisfy max > min on every axis")
        if not self.cell_xy > 0 or self.z_bins < 1:
            raise GeometryError("cell_xy must be positive and z_bins >= 1")
        for lo, hi, name in ((self.x_min, self.x_max, "x"), (self.y_min, self.y_max, "y")):
            n = (hi - lo) / self.cell_xy
            if abs(n - round(n)) > 1e-9:
                raise GeometryError(f"{name} extent {hi - lo} is not a multiple of cell_xy={self.cell_xy}")

    @property
    def nx(self) -> int:
        return int(round((self.x_max - self.x_min) / self.cell_xy))

    @property
    def ny(self) -> int:
        return int(round((self.y_max - self.y_min) / self.cell_xy))

    @property
    def nz(self) -> int:
        return self.z_bins

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.nx, self.ny, self.nz

    @property
    def cell_z(self) -> float:
        return (self.z_max - self.z_min) / self.z_bins

    def cell_center(self, ix: int, iy: int) -> tuple[float, float]:
        return (self.x_min + (ix + 0.5) * self.cell_xy, self.y_min + (iy + 0.5) * self.cell_xy)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("x_min", "x_max", "y_min", "y_max", "z_min", "z_max", "cell_xy", "z_bins")}


def ego_to_cell(grid: BEVGridSpec, p: Sequence[float]) -> Optional[tuple[int, int, int]]:
    ix = math.floor((p[0] - grid.x_min) / grid.cell_xy)
    iy = math.floor((p[1] - grid.y_min) / grid.cell_xy)
    iz = math.floor((p[2] - grid.z_min) / grid.cell_z)
    if 0 <= ix < grid.nx and 0 <= iy < grid.ny and 0 <= iz < grid.nz:
        return ix, iy, iz
    return None


def ego_to_cells(grid: BEVGridSpec, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`ego_to_cell`.

    Returns ``(idx, valid)`` where ``idx`` is an (N, 3) int array and ``valid``
    marks points inside the grid. Invalid rows of ``idx`` are meaningless.
    """
    pts = np.asarray(pts, dtype=np.float64)
    pts = pts.reshape(-1, pts.shape[-1])
    idx = np.empty((len(pts), 3), dtype=np.int64)
    with np.errstate(invalid="ignore"):
        idx[:, 0] = np.floor((pts[:, 0] - grid.x_min) / grid.cell_xy)
        idx[:, 1] = np.floor((pts[:, 1] - grid.y_min) / grid.cell_xy)
        idx[:, 2] = np.floor((pts[:, 2] - grid.z_min) / grid.cell_z)
    valid = ((idx >= 0) & (idx < np.array(grid.shape))).all(axis=1)
    return idx, valid


def azimuth(p: Sequence[float]) -> float:
    if p[0] == 0 and p[1] == 0:
        raise GeometryError("azimuth undefined at the origin")
    a = math.atan2(p[1], p[0])
    # atan2(-0.0, x<0) is -pi; keep the range half-open at -pi
    return math.pi if a == -math.pi else a
