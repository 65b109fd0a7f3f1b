"""LiDAR point cloud -> BEV feature encoders (pillar and voxel variants).

Learned backbones are replaced by fixed per-cell statistics followed by one
learned 1x1 projection. Empty cells stay exactly zero.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera_stream import s2c
from .geometry import BEVGridSpec, ego_to_cells
from .tensor_ops import ConvParams, conv2d, conv2d_backward

PILLAR_FEATURES = 5
VOXEL_FEATURES = 3
MODES = ("pillar", "voxel")


class ConfigError(ValueError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 4): x, y, z, intensity

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        if not np.isfinite(pts).all():
            raise ValueError("point coordinates must be finite")
        if len(pts) and (pts[:, 3].min() < 0 or pts[:, 3].max() > 1):
            raise ValueError("intensity must lie in [0, 1]")
        self.points = pts

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]

    def subset(self, keep: np.ndarray) -> "PointCloud":
        return PointCloud(self.points[keep])

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 4)))


def write_points(path, pc: PointCloud) -> None:
    """Headerless little-endian float32 records (x, y, z, intensity)."""
    Path(path).write_bytes(pc.points.astype("<f4").tobytes())


def read_points(path) -> PointCloud:
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise ValueError(f"{path}: size {len(raw)} is not a multiple of 16 bytes")
    return PointCloud(np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64))


@dataclass
class PillarFeatureSpec:
    c_lidar: int
    projection: ConvParams  # 1x1, hand features -> c_lidar

    def __post_init__(self):
        if self.c_lidar < 1:
            raise ConfigError("c_lidar must be >= 1")
        if self.projection.k != 1 or self.projection.out_ch != self.c_lidar:
            raise ConfigError("projection must be 1x1 with c_lidar outputs")


def _bin(pc: PointCloud, grid: BEVGridSpec):
    idx, valid = ego_to_cells(grid, pc.xyz)
    return idx[valid], pc.points[valid]


def pillar_hand_features(pc: PointCloud, grid: BEVGridSpec) -> np.ndarray:
    """(X, Y, 5): log(1+count), mean z, max z, mean intensity, occupancy."""
    nx, ny, _ = grid.shape
    out = np.zeros((nx * ny, PILLAR_FEATURES), dtype=np.float64)
    idx, pts = _bin(pc, grid)
    if len(pts):
        flat = idx[:, 0] * ny + idx[:, 1]
        # bincount and maximum.at both walk the points in index order
        count = np.bincount(flat, minlength=nx * ny).astype(np.float64)
        zsum = np.bincount(flat, weights=pts[:, 2], minlength=nx * ny)
        isum = np.bincount(flat, weights=pts[:, 3], minlength=nx * ny)
        zmax = np.full(nx * ny, -np.inf)
        np.maximum.at(zmax, flat, pts[:, 2])
        occ = count > 0
        out[occ, 0] = np.log1p(count[occ])
        out[occ, 1] = zsum[occ] / count[occ]
        out[occ, 2] = zmax[occ]
        out[occ, 3] = isum[occ] / count[occ]
        out[occ, 4] = 1.0
    return out.reshape(nx, ny, PILLAR_FEATURES).astype(np.float32)


def voxelize(pc: PointCloud, grid: BEVGridSpec, c: int = VOXEL_FEATURES) -> np.ndarray:
    """(X, Y, Z, 3): log(1+count), mean intensity, occupancy."""
    if c != VOXEL_FEATURES:
        raise ConfigError(f"voxel hand features have exactly {VOXEL_FEATURES} channels, got {c}")
    nx, ny, nz = grid.shape
    n = nx * ny * nz
    out = np.zeros((n, VOXEL_FEATURES), dtype=np.float64)
    idx, pts = _bin(pc, grid)
    if len(pts):
        flat = (idx[:, 0] * ny + idx[:, 1]) * nz + idx[:, 2]
        count = np.bincount(flat, minlength=n).astype(np.float64)
        isum = np.bincount(flat, weights=pts[:, 3], minlength=n)
        occ = count > 0
        out[occ, 0] = np.log1p(count[occ])
        out[occ, 1] = isum[occ] / count[occ]
        out[occ, 2] = 1.0
    return out.reshape(nx, ny, nz, VOXEL_FEATURES).astype(np.float32)


def hand_features(pc: PointCloud, grid: BEVGridSpec, mode: str) -> tuple[np.ndarray, np.ndarray]:
    """Fixed (non-learned) BEV input of the stream and its occupancy mask (X, Y, 1)."""
    if mode == "pillar":
        hand = pillar_hand_features(pc, grid)
        mask = hand[:, :, 4:5].copy()
    elif mode == "voxel":
        hand = s2c(voxelize(pc, grid))
        # occupancy is every third channel after s2c
        mask = (hand[:, :, 2::VOXEL_FEATURES].max(axis=2, keepdims=True) > 0).astype(np.float32)
    else:
        raise ConfigError(f"unknown lidar mode {mode!r}; expected one of {MODES}")
    return hand, mask


def project(hand: np.ndarray, mask: np.ndarray, proj: ConvParams) -> np.ndarray:
    return conv2d(hand.astype(proj.weight.dtype, copy=False), proj) * mask


def project_backward(hand: np.ndarray, mask: np.ndarray, proj: ConvParams, gy: np.ndarray) -> ConvParams:
    _, gp = conv2d_backward(hand.astype(proj.weight.dtype, copy=False), proj, gy * mask)
    return gp


def pillarize(pc: PointCloud, grid: BEVGridSpec, spec: PillarFeatureSpec) -> np.ndarray:
    hand, mask = hand_features(pc, grid, "pillar")
    return project(hand, mask, spec.projection)


def lidar_bev(pc: PointCloud, grid: BEVGridSpec, spec: PillarFeatureSpec, mode: str = "pillar") -> np.ndarray:
    """F_LiDAR (X, Y, c_lidar). In voxel mode ``spec.projection`` takes 3*Z inputs."""
    hand, mask = hand_features(pc, grid, mode)
    if spec.projection.in_ch != hand.shape[2]:
        raise ConfigError(f"{mode} projection expects {hand.shape[2]} inputs, got {spec.projection.in_ch}")
    return project(hand, mask, spec.projection)


def input_channels(mode: str, grid: BEVGridSpec) -> int:
    if mode == "pillar":
        return PILLAR_FEATURES
    if mode == "voxel":
        return VOXEL_FEATURES * grid.nz
    raise ConfigError(f"unknown lidar mode {mode!r}; expected one of {MODES}")
