"""Simulated sensor malfunctions for LiDAR point clouds and camera features.

Used both to augment training scenes and to corrupt evaluation scenes.
All random decisions take an explicit ``np.random.Generator`` (see
:mod:`bevfuse.rng`) so corruptions are reproducible per (seed, scene).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .geometry import Point3
from .lidar_stream import PointCloud

CAMERA_MODES = ("none", "missing_front", "preserve_front", "stuck")


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.pi - np.mod(np.pi - np.asarray(a, dtype=np.float64), 2 * np.pi)
    return float(w) if np.ndim(w) == 0 else w


@dataclass(frozen=True)
class Box3D:
    center: Point3
    size: tuple[float, float, float]
    yaw: float
    class_id: int

    def __post_init__(self):
        object.__setattr__(self, "center", Point3(*(float(c) for c in self.center)))
        object.__setattr__(self, "size", tuple(float(s) for s in self.size))
        if min(self.size) <= 0:
            raise ValueError(f"box sizes must be positive, got {self.size}")
        if not -math.pi < self.yaw <= math.pi:
            raise ValueError(f"yaw {self.yaw} outside (-pi, pi]")

    def to_row(self) -> list[float]:
        return [*self.center, *self.size, self.yaw, self.class_id]

    def footprint(self) -> np.ndarray:
        """BEV corners (4, 2), counter-clockwise."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hx, hy = self.size[0] / 2, self.size[1] / 2
        local = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array(self.center[:2])


@dataclass(frozen=True)
class MalfunctionSpec:
    fov: Optional[tuple[float, float]] = None
    object_dropout: Optional[tuple[float, float]] = None  # (p_frame, p_object)
    camera_mode: str = "none"
    stuck_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.fov is not None:
            lo, hi = self.fov
            if not (-math.pi <= lo < hi <= math.pi):
                raise ValueError(f"fov {self.fov} must satisfy -pi <= min < max <= pi")
        if self.object_dropout is not None:
            if not all(0.0 <= p <= 1.0 for p in self.object_dropout):
                raise ValueError(f"dropout probabilities {self.object_dropout} outside [0, 1]")
        if self.camera_mode not in CAMERA_MODES:
            raise ValueError(f"camera_mode {self.camera_mode!r} not in {CAMERA_MODES}")
        if not 0.0 <= self.stuck_prob <= 1.0:
            raise ValueError(f"stuck_prob {self.stuck_prob} outside [0, 1]")

    @property
    def is_clean(self) -> bool:
        return self.fov is None and self.object_dropout is None and self.camera_mode == "none"


def point_azimuths(xyz: np.ndarray) -> np.ndarray:
    az = np.arctan2(xyz[:, 1], xyz[:, 0])
    az[az == -np.pi] = np.pi
    return az


def limit_fov(pc: PointCloud, fov: tuple[float, float]) -> PointCloud:
    """Keep points whose azimuth lies in [min, max] (both inclusive), in order."""
    az = point_azimuths(pc.xyz)
    return pc.subset((az >= fov[0]) & (az <= fov[1]))


def point_in_box(p: Sequence[float], b: Box3D) -> bool:
    dx, dy, dz = p[0] - b.center[0], p[1] - b.center[1], p[2] - b.center[2]
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    return abs(lx) <= b.size[0] / 2 and abs(ly) <= b.size[1] / 2 and abs(dz) <= b.size[2] / 2


def points_in_box(xyz: np.ndarray, b: Box3D) -> np.ndarray:
    """Vectorized :func:`point_in_box`; same arithmetic, same result per point."""
    d = xyz - np.asarray(b.center)
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    lx = c * d[:, 0] + s * d[:, 1]
    ly = -s * d[:, 0] + c * d[:, 1]
    return ((np.abs(lx) <= b.size[0] / 2) & (np.abs(ly) <= b.size[1] / 2)
            & (np.abs(d[:, 2]) <= b.size[2] / 2))


def draw_dropped_boxes(n_boxes: int, probs: tuple[float, float], rng: np.random.Generator) -> np.ndarray:
    """Frame coin, then one coin per box. Returns a boolean mask over boxes."""
    p_frame, p_object = probs
    if rng.random() >= p_frame:
        return np.zeros(n_boxes, dtype=bool)
    return rng.random(n_boxes) < p_object


def drop_object_points(pc: PointCloud, boxes: Sequence[Box3D], spec, rng: np.random.Generator) -> PointCloud:
    """Remove the points of randomly selected boxes.

    ``spec`` is a :class:`MalfunctionSpec` or a ``(p_frame, p_object)`` pair.
    """
    probs = spec.object_dropout if isinstance(spec, MalfunctionSpec) else tuple(spec)
    if probs is None:
        return pc
    dropped = draw_dropped_boxes(len(boxes), probs, rng)
    if not dropped.any():
        return pc
    remove = np.zeros(len(pc), dtype=bool)
    for b, d in zip(boxes, dropped):
        if d:
            remove |= points_in_box(pc.xyz, b)
    return pc.subset(~remove)


def camera_malfunction(features: Sequence[np.ndarray], front_index: int, mode: str,
                       stuck_prob: float = 0.5, previous_features: Optional[Sequence[np.ndarray]] = None,
                       rng: Optional[np.random.Generator] = None) -> list[np.ndarray]:
    """Zero or freeze per-camera feature maps; shapes never change."""
    if mode not in CAMERA_MODES:
        raise ValueError(f"unknown camera malfunction {mode!r}")
    if not 0 <= front_index < len(features):
        raise ValueError(f"front_index {front_index} out of range for {len(features)} cameras")
    if mode == "none":
        return list(features)
    if mode == "missing_front":
        return [np.zeros_like(f) if i == front_index else f for i, f in enumerate(features)]
    if mode == "preserve_front":
        return [f if i == front_index else np.zeros_like(f) for i, f in enumerate(features)]
    if previous_features is None:
        raise ValueError("stuck mode needs previous_features")
    if len(previous_features) != len(features):
        raise ValueError("previous_features must cover every camera")
    if rng is None:
        raise ValueError("stuck mode needs an rng")
    if rng.random() < stuck_prob:
        return list(previous_features)
    return list(features)
