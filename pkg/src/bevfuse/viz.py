"""BEV snapshots as binary PPM (P6), one pixel per grid cell.

Column = ix, row = ny - 1 - iy, so +x points right and +y points up.
Gray is LiDAR point density, blue GT footprints, green detections matched
to a GT at the 2 m threshold, red unmatched detections.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .augmentation import Box3D, points_in_box
from .detection import Detection
from .geometry import BEVGridSpec, ego_to_cells
from .lidar_stream import PointCloud
from .metrics import TP_THRESHOLD, match_detections

BLUE = (40, 90, 255)
GREEN = (40, 220, 60)
RED = (235, 40, 40)


def _footprint_cells(grid: BEVGridSpec, box: Box3D) -> np.ndarray:
    """(X, Y) mask of cells whose center lies in the box footprint, plus the center cell."""
    xs = grid.x_min + (np.arange(grid.nx) + 0.5) * grid.cell_xy
    ys = grid.y_min + (np.arange(grid.ny) + 0.5) * grid.cell_xy
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, box.center[2])])
    mask = points_in_box(pts, box).reshape(grid.nx, grid.ny)
    idx, valid = ego_to_cells(grid, np.array([[box.center[0], box.center[1], grid.z_min]]))
    if valid[0]:
        mask[idx[0, 0], idx[0, 1]] = True
    return mask


def render_bev(grid: BEVGridSpec, cloud: PointCloud, detections: Sequence[Detection],
               gts: Sequence[Box3D]) -> np.ndarray:
    """(X, Y, 3) uint8 image indexed by cell."""
    img = np.zeros((grid.nx, grid.ny, 3), dtype=np.uint8)
    if len(cloud):
        # density ignores height so every return counts
        flat = cloud.xyz.copy()
        flat[:, 2] = grid.z_min
        idx, valid = ego_to_cells(grid, flat)
        counts = np.zeros((grid.nx, grid.ny))
        np.add.at(counts, (idx[valid, 0], idx[valid, 1]), 1)
        if counts.max() > 0:
            gray = np.round(255 * np.log1p(counts) / np.log1p(counts.max())).astype(np.uint8)
            img[...] = gray[:, :, None]
    for b in gts:
        img[_footprint_cells(grid, b)] = BLUE
    matched = {i for i, _ in match_detections(detections, gts, TP_THRESHOLD).pairs} if detections else set()
    for i, d in enumerate(detections):
        img[_footprint_cells(grid, d.box)] = GREEN if i in matched else RED
    return img


def write_ppm(path, img: np.ndarray) -> None:
    """``img`` is indexed (ix, iy); written with +y up."""
    nx, ny, _ = img.shape
    rows = np.ascontiguousarray(img.transpose(1, 0, 2)[::-1])
    Path(path).write_bytes(f"P6 {nx} {ny} 255\n".encode("ascii") + rows.tobytes())


def read_ppm(path) -> np.ndarray:
    """Inverse of :func:`write_ppm`; returns the (ix, iy, 3) image."""
    raw = Path(path).read_bytes()
    end = raw.index(b"\n")
    tag, w, h, maxval = raw[:end].decode("ascii").split()
    if tag != "P6" or maxval != "255":
        raise ValueError(f"{path}: not an 8-bit P6 image")
    rows = np.frombuffer(raw, dtype=np.uint8, offset=end + 1).reshape(int(h), int(w), 3)
    return rows[::-1].transpose(1, 0, 2).copy()


def dump_bev(grid: BEVGridSpec, cloud: PointCloud, detections: Sequence[Detection],
             gts: Sequence[Box3D], out_path) -> None:
    write_ppm(out_path, render_bev(grid, cloud, detections, gts))
