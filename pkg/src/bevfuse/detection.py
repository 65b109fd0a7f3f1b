"""Center-heatmap detection head, decoder and training loss.

Regression channels per cell: (dx, dy, log size_x, log size_y, sin yaw, cos yaw),
where (dx, dy) is the object center offset from the cell center in cell
units. Box height and elevation are per-class constants.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .augmentation import Box3D, wrap_angle
from .geometry import BEVGridSpec
from .tensor_ops import ConvParams, ShapeError, conv2d, conv2d_backward, sigmoid, sigmoid_backward

REG_CHANNELS = 6
CLAMP = (1e-4, 1 - 1e-4)
FOCAL_ALPHA = 2
FOCAL_BETA = 4


@dataclass(frozen=True)
class Detection:
    box: Box3D
    score: float
    class_id: int

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass
class HeadParams:
    heatmap_conv: ConvParams  # 3x3, C -> K
    reg_conv: ConvParams  # 3x3, C -> 6

    def __post_init__(self):
        if self.reg_conv.out_ch != REG_CHANNELS:
            raise ShapeError(f"regression conv must have {REG_CHANNELS} outputs")
        if self.heatmap_conv.in_ch != self.reg_conv.in_ch:
            raise ShapeError("heatmap and regression convs see different channel counts")

    @property
    def num_classes(self) -> int:
        return self.heatmap_conv.out_ch

    @classmethod
    def init(cls, c_in: int, num_classes: int, rng: np.random.Generator, prior: float = 0.1) -> "HeadParams":
        hm = ConvParams.init(num_classes, c_in, 3, rng)
        # start every cell at a low objectness prior instead of sigmoid(0) = 0.5
        hm.bias[:] = -math.log((1 - prior) / prior)
        return cls(hm, ConvParams.init(REG_CHANNELS, c_in, 3, rng))


def head_forward(f: np.ndarray, p: HeadParams) -> tuple[np.ndarray, np.ndarray]:
    return sigmoid(conv2d(f, p.heatmap_conv)), conv2d(f, p.reg_conv)


def head_backward(f: np.ndarray, p: HeadParams, heatmap: np.ndarray, g_heat: np.ndarray,
                  g_reg: np.ndarray) -> tuple[np.ndarray, dict[str, ConvParams]]:
    gf1, gh = conv2d_backward(f, p.heatmap_conv, sigmoid_backward(heatmap, g_heat))
    gf2, gr = conv2d_backward(f, p.reg_conv, g_reg)
    return gf1 + gf2, {"heatmap_conv": gh, "reg_conv": gr}


# ------------------------------------------------------------------ targets

def box_cell(grid: BEVGridSpec, b: Box3D) -> tuple[int, int] | None:
    ix = math.floor((b.center[0] - grid.x_min) / grid.cell_xy)
    iy = math.floor((b.center[1] - grid.y_min) / grid.cell_xy)
    if 0 <= ix < grid.nx and 0 <= iy < grid.ny:
        return ix, iy
    return None


def gaussian_radius(b: Box3D, grid: BEVGridSpec) -> int:
    return max(1, int(0.5 * min(b.size[0], b.size[1]) / grid.cell_xy))


@dataclass
class Targets:
    heatmap: np.ndarray  # (X, Y, K)
    regs: np.ndarray  # (X, Y, 6)
    cells: np.ndarray  # (M, 2) int, one row per ground-truth center cell


def build_targets(boxes: Sequence[Box3D], grid: BEVGridSpec, num_classes: int) -> Targets:
    """Gaussian peaks (value 1 at the center cell, sigma = radius/3) and reg targets."""
    nx, ny = grid.nx, grid.ny
    hm = np.zeros((nx, ny, num_classes), dtype=np.float64)
    regs = np.zeros((nx, ny, REG_CHANNELS), dtype=np.float64)
    cells = []
    for b in boxes:
        cell = box_cell(grid, b)
        if cell is None:
            continue
        ix, iy = cell
        r = gaussian_radius(b, grid)
        sigma = r / 3.0
        x0, x1 = max(0, ix - r), min(nx, ix + r + 1)
        y0, y1 = max(0, iy - r), min(ny, iy + r + 1)
        di = np.arange(x0, x1)[:, None] - ix
        dj = np.arange(y0, y1)[None, :] - iy
        g = np.exp(-(di ** 2 + dj ** 2) / (2 * sigma ** 2))
        hm[x0:x1, y0:y1, b.class_id] = np.maximum(hm[x0:x1, y0:y1, b.class_id], g)
        fx = (b.center[0] - grid.x_min) / grid.cell_xy - ix - 0.5
        fy = (b.center[1] - grid.y_min) / grid.cell_xy - iy - 0.5
        regs[ix, iy] = (fx, fy, math.log(b.size[0]), math.log(b.size[1]), math.sin(b.yaw), math.cos(b.yaw))
        cells.append((ix, iy))
    return Targets(hm, regs, np.array(cells, dtype=np.int64).reshape(-1, 2))


# ------------------------------------------------------------------ loss

def head_loss(heatmap: np.ndarray, regs: np.ndarray, gt_boxes: Sequence[Box3D], grid: BEVGridSpec,
              reg_weight: float = 1.0, targets: Targets | None = None):
    """Penalty-reduced focal loss on the heatmap plus L1 on regs at center cells.

    Returns ``(loss, grad_heatmap, grad_regs)``. Heatmap values are clamped to
    [1e-4, 1 - 1e-4]; the gradient is zero where the clamp is active.
    """
    if targets is None:
        targets = build_targets(gt_boxes, grid, heatmap.shape[2])
    y = targets.heatmap
    lo, hi = CLAMP
    h64 = heatmap.astype(np.float64)
    p = np.clip(h64, lo, hi)
    pos = y == 1.0
    n_pos = max(1, int(pos.sum()))

    one_m = 1 - p
    log_p, log_1mp = np.log(p), np.log(one_m)
    neg_w = (1 - y) ** FOCAL_BETA
    loss_map = np.where(pos, -one_m ** FOCAL_ALPHA * log_p, -neg_w * p ** FOCAL_ALPHA * log_1mp)
    grad_map = np.where(
        pos,
        FOCAL_ALPHA * one_m ** (FOCAL_ALPHA - 1) * log_p - one_m ** FOCAL_ALPHA / p,
        -neg_w * (FOCAL_ALPHA * p ** (FOCAL_ALPHA - 1) * log_1mp - p ** FOCAL_ALPHA / one_m),
    )
    grad_map[(h64 <= lo) | (h64 >= hi)] = 0.0
    loss = loss_map.sum() / n_pos
    g_heat = grad_map / n_pos

    g_reg = np.zeros(regs.shape, dtype=np.float64)
    if len(targets.cells):
        ix, iy = targets.cells[:, 0], targets.cells[:, 1]
        diff = regs[ix, iy].astype(np.float64) - targets.regs[ix, iy]
        m = len(targets.cells)
        loss += reg_weight * np.abs(diff).sum() / m
        np.add.at(g_reg, (ix, iy), reg_weight * np.sign(diff) / m)
    return float(loss), g_heat.astype(heatmap.dtype), g_reg.astype(regs.dtype)


# ------------------------------------------------------------------ decode

_NEIGHBORS = [(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1) if (di, dj) != (0, 0)]


def find_peaks(score: np.ndarray) -> np.ndarray:
    """Boolean (X, Y) mask of 8-neighborhood maxima.

    A neighbor with an equal score suppresses the cell only if it comes first
    in (ix, iy) order, so plateaus keep their lexicographically smallest cell.
    """
    nx, ny = score.shape
    padded = np.full((nx + 2, ny + 2), -np.inf)
    padded[1:-1, 1:-1] = score
    peak = np.ones((nx, ny), dtype=bool)
    for di, dj in _NEIGHBORS:
        nb = padded[1 + di:1 + di + nx, 1 + dj:1 + dj + ny]
        if (di, dj) < (0, 0):
            peak &= score > nb
        else:
            peak &= score >= nb
    return peak


def decode(heatmap: np.ndarray, regs: np.ndarray, grid: BEVGridSpec, score_thresh: float = 0.1,
           max_dets: int = 100, class_dz: Sequence[float] | None = None) -> list[Detection]:
    k = heatmap.shape[2]
    if class_dz is None:
        class_dz = [1.0] * k
    score = heatmap.max(axis=2).astype(np.float64)
    cls = heatmap.argmax(axis=2)
    keep = find_peaks(score) & (score >= score_thresh)
    ix, iy = np.nonzero(keep)  # row-major, i.e. (ix, iy) order
    order = np.argsort(-score[ix, iy], kind="stable")[:max_dets]
    dets = []
    for n in order:
        i, j = int(ix[n]), int(iy[n])
        r = regs[i, j].astype(np.float64)
        c = int(cls[i, j])
        dz = float(class_dz[c])
        x = grid.x_min + (i + 0.5 + r[0]) * grid.cell_xy
        y = grid.y_min + (j + 0.5 + r[1]) * grid.cell_xy
        size = (math.exp(min(r[2], 10.0)), math.exp(min(r[3], 10.0)), dz)
        yaw = wrap_angle(math.atan2(r[4], r[5]))
        s = float(min(max(score[i, j], 0.0), 1.0))
        dets.append(Detection(Box3D((x, y, dz / 2), size, yaw, c), s, c))
    return dets
