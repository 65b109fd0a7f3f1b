"""Dynamic fusion of camera and LiDAR BEV features.

``fused = adaptive(static(concat(F_cam, F_lidar)))`` where ``static`` is a
3x3 conv down to C_lidar channels and ``adaptive`` rescales each channel by
``sigmoid(W @ mean_xy(F) + b)``. The adaptive half can be switched off.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_ops import (
    ConvParams,
    ShapeError,
    concat_channels,
    conv2d,
    conv2d_backward,
    global_avg_pool,
    global_avg_pool_backward,
    sigmoid,
    sigmoid_backward,
    split_channels,
)


@dataclass
class FusionParams:
    static_conv: ConvParams  # 3x3, C_cam + C_lidar -> C_lidar
    gate: ConvParams  # 1x1, C_lidar -> C_lidar
    afs_enabled: bool = True

    def __post_init__(self):
        c = self.static_conv.out_ch
        if self.gate.k != 1 or self.gate.in_ch != c or self.gate.out_ch != c:
            raise ShapeError(f"gate must be a 1x1 {c}->{c} conv")

    @classmethod
    def init(cls, c_camera: int, c_lidar: int, rng: np.random.Generator, afs_enabled: bool = True) -> "FusionParams":
        gate = ConvParams.init(c_lidar, c_lidar, 1, rng)
        # zero gate bias recovers the bias-free form W f_avg(F)
        gate.bias[:] = 0
        return cls(ConvParams.init(c_lidar, c_camera + c_lidar, 3, rng), gate, afs_enabled)


def _check(f_cam: np.ndarray, f_lidar: np.ndarray, p: FusionParams) -> None:
    if f_cam.shape[:2] != f_lidar.shape[:2]:
        raise ShapeError(f"camera BEV {f_cam.shape[:2]} and LiDAR BEV {f_lidar.shape[:2]} differ")
    if f_cam.shape[2] + f_lidar.shape[2] != p.static_conv.in_ch:
        raise ShapeError(
            f"static conv expects {p.static_conv.in_ch} input channels, got "
            f"{f_cam.shape[2]} + {f_lidar.shape[2]}")


def fuse_static(f_cam: np.ndarray, f_lidar: np.ndarray, p: FusionParams) -> np.ndarray:
    _check(f_cam, f_lidar, p)
    return conv2d(concat_channels(f_cam, f_lidar), p.static_conv)


def gate_values(f: np.ndarray, p: FusionParams) -> np.ndarray:
    """Per-channel gate in (0, 1), shape (C,)."""
    if f.shape[2] != p.gate.in_ch:
        raise ShapeError(f"gate expects {p.gate.in_ch} channels, got {f.shape[2]}")
    return sigmoid(conv2d(global_avg_pool(f), p.gate)).reshape(-1)


def fuse_adaptive(f: np.ndarray, p: FusionParams) -> np.ndarray:
    return gate_values(f, p) * f


def dynamic_fusion(f_cam: np.ndarray, f_lidar: np.ndarray, p: FusionParams) -> np.ndarray:
    s = fuse_static(f_cam, f_lidar, p)
    return fuse_adaptive(s, p) if p.afs_enabled else s


def fuse_adaptive_backward(f: np.ndarray, p: FusionParams, g: np.ndarray) -> tuple[np.ndarray, ConvParams]:
    """Grad of ``gate(f) * f`` w.r.t. ``f`` and the gate conv."""
    pooled = global_avg_pool(f)
    gate = sigmoid(conv2d(pooled, p.gate))  # (1, 1, C)
    # direct path plus the path through the pooled mean
    gf = g * gate
    ggate = (g * f).sum(axis=(0, 1)).reshape(1, 1, -1)
    gpooled, gate_grad = conv2d_backward(pooled, p.gate, sigmoid_backward(gate, ggate))
    return gf + global_avg_pool_backward(f.shape, gpooled), gate_grad


def fusion_backward(f_cam: np.ndarray, f_lidar: np.ndarray, p: FusionParams, g: np.ndarray):
    """Returns ``(grad_cam, grad_lidar, {"static_conv": ConvParams, "gate": ConvParams})``.

    The gate grad is zero when AFS is disabled.
    """
    cat = concat_channels(f_cam, f_lidar)
    if p.afs_enabled:
        gs, gate_grad = fuse_adaptive_backward(conv2d(cat, p.static_conv), p, g)
    else:
        gs, gate_grad = g, ConvParams(np.zeros_like(p.gate.weight), np.zeros_like(p.gate.bias))
    gcat, gstatic = conv2d_backward(cat, p.static_conv, gs)
    gc, gl = split_channels(gcat, f_cam.shape[2])
    return gc, gl, {"static_conv": gstatic, "gate": gate_grad}
