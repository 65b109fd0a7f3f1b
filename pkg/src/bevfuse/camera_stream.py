"""Camera features -> BEV feature (lift, splat, spatial-to-channel, encode).

Pipeline per forward pass::

    multi-scale maps --adp_fuse--> (H, W, C)
        --predict_depth--> (H, W, D) categorical
        --lift--> (H, W, D, C) frustum
        --splat (all cameras)--> (X, Y, Z, C) pseudo-voxel
        --s2c--> (X, Y, Z*C) --bev_encode--> (X, Y, C_camera)
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .geometry import BEVGridSpec, CameraModel, ego_to_cells, unproject_rays
from .tensor_ops import (
    ConvParams,
    ShapeError,
    check_finite,
    concat_channels,
    conv2d,
    conv2d_backward,
    relu,
    relu_backward,
    softmax_backward,
    softmax_lastaxis,
)


# ------------------------------------------------------------------ data types

@dataclass(frozen=True)
class DepthBins:
    d_min: float
    d_max: float
    n: int

    def __post_init__(self):
        if not (self.d_max > self.d_min > 0) or self.n < 1:
            raise ValueError(f"invalid depth bins {self}")

    @property
    def centers(self) -> np.ndarray:
        k = np.arange(self.n, dtype=np.float64)
        return self.d_min + (k + 0.5) * (self.d_max - self.d_min) / self.n


@dataclass
class DepthDistribution:
    data: np.ndarray  # (H, W, D)
    bins: DepthBins

    def __post_init__(self):
        if self.data.shape[-1] != self.bins.n:
            raise ShapeError(f"depth distribution has {self.data.shape[-1]} bins, expected {self.bins.n}")

    def check(self, tol: float = 1e-5) -> None:
        if self.data.min() < 0 or self.data.max() > 1:
            raise ValueError("depth probabilities outside [0, 1]")
        if np.abs(self.data.sum(axis=-1) - 1).max() > tol:
            raise ValueError("depth probabilities do not sum to 1")


@dataclass
class CameraStreamParams:
    adp_scales: list[ConvParams]  # one 1x1 per input scale
    adp_out: ConvParams  # 1x1, n_scales*C -> C
    depth_head: ConvParams  # 1x1, C -> D
    bev_convs: list[ConvParams] = field(default_factory=list)  # four 3x3

    def __post_init__(self):
        if len(self.bev_convs) != 4:
            raise ShapeError(f"BEV encoder needs exactly four convs, got {len(self.bev_convs)}")
        for a, b in zip(self.bev_convs, self.bev_convs[1:]):
            if a.out_ch != b.in_ch:
                raise ShapeError("BEV encoder channel chain is inconsistent")
        c = self.depth_head.in_ch
        if self.adp_out.out_ch != c or self.adp_out.in_ch != c * len(self.adp_scales):
            raise ShapeError("ADP output conv does not match depth head input")

    @property
    def c_image(self) -> int:
        return self.depth_head.in_ch

    @property
    def c_camera(self) -> int:
        return self.bev_convs[-1].out_ch

    @classmethod
    def init(cls, c_image: int, n_scales: int, depth_bins: int, z_bins: int,
             hidden: Sequence[int], c_camera: int, rng: np.random.Generator) -> "CameraStreamParams":
        chain = [z_bins * c_image, *hidden, c_camera]
        if len(chain) != 5:
            raise ShapeError(f"need three hidden widths for four BEV convs, got {list(hidden)}")
        lin, rel = np.sqrt(3.0), np.sqrt(6.0)
        n = len(chain) - 1
        return cls(
            adp_scales=[ConvParams.init(c_image, c_image, 1, rng, gain=lin) for _ in range(n_scales)],
            adp_out=ConvParams.init(c_image, n_scales * c_image, 1, rng, gain=lin),
            depth_head=ConvParams.init(depth_bins, c_image, 1, rng, gain=lin),
            bev_convs=[ConvParams.init(o, i, 3, rng, gain=rel if j < n - 1 else lin)
                       for j, (i, o) in enumerate(zip(chain[:-1], chain[1:]))],
        )


# ------------------------------------------------------------------ file format

def write_feature_map(path, arr: np.ndarray) -> None:
    """Text header ``FEAT h w c`` then little-endian float32 row-major data."""
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    Path(path).write_bytes(f"FEAT {h} {w} {c}\n".encode("ascii") + arr.astype("<f4").tobytes())


def read_feature_map(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    end = raw.index(b"\n")
    tag, *dims = raw[:end].decode("ascii").split()
    if tag != "FEAT" or len(dims) != 3:
        raise ValueError(f"{path}: bad feature map header")
    h, w, c = (int(d) for d in dims)
    data = np.frombuffer(raw, dtype="<f4", offset=end + 1)
    if data.size != h * w * c:
        raise ValueError(f"{path}: expected {h * w * c} values, found {data.size}")
    return data.reshape(h, w, c).astype(np.float32)


# ------------------------------------------------------------------ ADP

def upsample_nearest(x: np.ndarray, f: int) -> np.ndarray:
    return x if f == 1 else np.repeat(np.repeat(x, f, axis=0), f, axis=1)


def upsample_nearest_backward(g: np.ndarray, f: int) -> np.ndarray:
    if f == 1:
        return g
    h, w, c = g.shape
    return g.reshape(h // f, f, w // f, f, c).sum(axis=(1, 3))


def _pool_ranges(n_in: int, n_out: int):
    return [(i * n_in // n_out, -(-(i + 1) * n_in // n_out)) for i in range(n_out)]


def adaptive_avg_pool(x: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    h, w, _ = x.shape
    if (h, w) == tuple(out_hw):
        return x
    rows, cols = _pool_ranges(h, out_hw[0]), _pool_ranges(w, out_hw[1])
    return np.stack([np.stack([x[r0:r1, c0:c1].mean(axis=(0, 1)) for c0, c1 in cols]) for r0, r1 in rows])


def adaptive_avg_pool_backward(x_shape, g: np.ndarray) -> np.ndarray:
    h, w, c = x_shape
    if (h, w) == g.shape[:2]:
        return g
    out = np.zeros(x_shape, dtype=g.dtype)
    for i, (r0, r1) in enumerate(_pool_ranges(h, g.shape[0])):
        for j, (c0, c1) in enumerate(_pool_ranges(w, g.shape[1])):
            out[r0:r1, c0:c1] += g[i, j] / ((r1 - r0) * (c1 - c0))
    return out


def adp_fuse(scales: Sequence[np.ndarray], params: CameraStreamParams, cache: dict | None = None) -> np.ndarray:
    """Align multi-scale maps to the finest resolution and merge them.

    ``scales[k]`` has resolution ``H/2^k x W/2^k``; all share C channels.
    """
    if not scales:
        raise ShapeError("adp_fuse needs at least one scale")
    if len(scales) != len(params.adp_scales):
        raise ShapeError(f"{len(scales)} scales given, params expect {len(params.adp_scales)}")
    h, w, c = scales[0].shape
    branches = []
    for k, (x, conv) in enumerate(zip(scales, params.adp_scales)):
        if x.shape[2] != c:
            raise ShapeError(f"scale {k} has {x.shape[2]} channels, expected {c}")
        f = 2 ** k
        if x.shape[0] * f != h or x.shape[1] * f != w:
            raise ShapeError(f"scale {k} shape {x.shape[:2]} is not finest/{f}")
        up = adaptive_avg_pool(upsample_nearest(x, f), (h, w))
        branches.append(conv2d(up, conv))
        if cache is not None:
            cache.setdefault("adp_up", []).append(up)
    cat = branches[0]
    for b in branches[1:]:
        cat = concat_channels(cat, b)
    if cache is not None:
        cache["adp_cat"] = cat
        cache["adp_shapes"] = [x.shape for x in scales]
    return conv2d(cat, params.adp_out)


def adp_backward(params: CameraStreamParams, cache: dict, g: np.ndarray, grads: dict) -> None:
    gcat, gp = conv2d_backward(cache["adp_cat"], params.adp_out, g)
    _acc(grads, "adp_out", gp)
    c = params.c_image
    for k, (up, conv) in enumerate(zip(cache["adp_up"], params.adp_scales)):
        _, gk = conv2d_backward(up, conv, gcat[:, :, k * c:(k + 1) * c])
        _acc(grads, f"adp_scales.{k}", gk)


# ------------------------------------------------------------------ depth + lift

def predict_depth(feat: np.ndarray, params: CameraStreamParams, bins: DepthBins) -> DepthDistribution:
    if feat.shape[2] != params.depth_head.in_ch:
        raise ShapeError(f"depth head expects {params.depth_head.in_ch} channels, got {feat.shape[2]}")
    if params.depth_head.out_ch != bins.n:
        raise ShapeError("depth head output count differs from depth bin count")
    return DepthDistribution(softmax_lastaxis(conv2d(feat, params.depth_head)), bins)


def lift(feat: np.ndarray, dd: np.ndarray) -> np.ndarray:
    """Outer product per pixel: out[h, w, d, c] = dd[h, w, d] * feat[h, w, c]."""
    if feat.shape[:2] != dd.shape[:2]:
        raise ShapeError(f"lift: feature {feat.shape[:2]} and depth {dd.shape[:2]} differ")
    return dd[:, :, :, None] * feat[:, :, None, :]


def lift_backward(feat: np.ndarray, dd: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return np.einsum("hwdc,hwd->hwc", g, dd), np.einsum("hwdc,hwc->hwd", g, feat)


# ------------------------------------------------------------------ splat

@dataclass
class SplatPlan:
    """Precomputed frustum-point -> voxel assignment for a fixed rig and grid.

    Frustum points are ordered camera-major, then pixel rows, then columns,
    then depth bins; ``cell[n]`` is the flat voxel index or -1.
    """
    grid: BEVGridSpec
    bins: DepthBins
    image_shapes: list[tuple[int, int]]
    cell: np.ndarray
    matrix: sp.csr_matrix  # (X*Y*Z, n_points), entries 1

    @classmethod
    def build(cls, cams: Sequence[CameraModel], grid: BEVGridSpec, bins: DepthBins) -> "SplatPlan":
        nx, ny, nz = grid.shape
        cells = []
        for cam in cams:
            pts = unproject_rays(cam, bins.centers).reshape(-1, 3)
            idx, valid = ego_to_cells(grid, pts)
            flat = (idx[:, 0] * ny + idx[:, 1]) * nz + idx[:, 2]
            cells.append(np.where(valid, flat, -1))
        cell = np.concatenate(cells) if cells else np.zeros(0, dtype=np.int64)
        cols = np.flatnonzero(cell >= 0)
        # CSR rows keep column order, so per-cell sums follow frustum order
        m = sp.csr_matrix((np.ones(len(cols), dtype=np.float32), (cell[cols], cols)),
                          shape=(nx * ny * nz, len(cell)))
        m.sort_indices()
        return cls(grid, bins, [(c.height, c.width) for c in cams], cell, m)

    @property
    def in_grid(self) -> np.ndarray:
        return self.cell >= 0


def _stack_frustums(frustums: Sequence[np.ndarray], plan: SplatPlan) -> np.ndarray:
    if len(frustums) != len(plan.image_shapes):
        raise ShapeError(f"{len(frustums)} frustums for {len(plan.image_shapes)} cameras")
    for f, hw in zip(frustums, plan.image_shapes):
        if f.shape[:3] != (*hw, plan.bins.n):
            raise ShapeError(f"frustum {f.shape[:3]} does not match camera {(*hw, plan.bins.n)}")
    return np.concatenate([f.reshape(-1, f.shape[-1]) for f in frustums])


def splat(frustums: Sequence[np.ndarray], plan: SplatPlan) -> np.ndarray:
    """Sum-pool every in-grid frustum point into the pseudo-voxel (X, Y, Z, C)."""
    flat = _stack_frustums(frustums, plan)
    v = plan.matrix @ flat
    return check_finite(np.asarray(v, dtype=flat.dtype).reshape(*plan.grid.shape, flat.shape[1]), "splat")


def splat_backward(plan: SplatPlan, g: np.ndarray) -> list[np.ndarray]:
    gflat = plan.matrix.T @ g.reshape(-1, g.shape[-1])
    out, start = [], 0
    for h, w in plan.image_shapes:
        n = h * w * plan.bins.n
        out.append(np.asarray(gflat[start:start + n]).reshape(h, w, plan.bins.n, g.shape[-1]))
        start += n
    return out


def in_grid_mass(frustums: Sequence[np.ndarray], plan: SplatPlan) -> np.ndarray:
    """Per-channel total of the contributions whose ray lands inside the grid."""
    flat = _stack_frustums(frustums, plan).astype(np.float64)
    return flat[plan.in_grid].sum(axis=0)


def s2c(v: np.ndarray) -> np.ndarray:
    """(X, Y, Z, C) -> (X, Y, Z*C) with channel index z*C + c."""
    x, y, z, c = v.shape
    return v.reshape(x, y, z * c)


def c2s(bev: np.ndarray, z: int) -> np.ndarray:
    x, y, zc = bev.shape
    return bev.reshape(x, y, z, zc // z)


# ------------------------------------------------------------------ BEV encoder

def bev_encode(bev: np.ndarray, convs: Sequence[ConvParams], cache: dict | None = None) -> np.ndarray:
    x = bev
    acts = []
    for i, conv in enumerate(convs):
        acts.append(x)
        x = conv2d(x, conv)
        if i < len(convs) - 1:
            acts.append(x)
            x = relu(x)
    if cache is not None:
        cache["bev_acts"] = acts
    return x


def bev_encode_backward(convs: Sequence[ConvParams], cache: dict, g: np.ndarray, grads: dict) -> np.ndarray:
    acts = cache["bev_acts"]
    for i in reversed(range(len(convs))):
        if i < len(convs) - 1:
            g = relu_backward(acts[2 * i + 1], g)
        g, gp = conv2d_backward(acts[2 * i], convs[i], g)
        _acc(grads, f"bev_convs.{i}", gp)
    return g


# ------------------------------------------------------------------ full stream

def _acc(grads: dict, name: str, gp: ConvParams) -> None:
    if name in grads:
        grads[name].weight += gp.weight
        grads[name].bias += gp.bias
    else:
        grads[name] = gp


def camera_forward(features: Sequence[Sequence[np.ndarray]], params: CameraStreamParams,
                   plan: SplatPlan) -> tuple[np.ndarray, dict]:
    """Run the stream; ``features[i]`` is the list of scales for camera i."""
    cache: dict = {"cams": []}
    frustums = []
    for scales in features:
        cc: dict = {}
        feat = adp_fuse(scales, params, cc)
        dd = predict_depth(feat, params, plan.bins).data
        frustums.append(lift(feat, dd))
        cc["feat"], cc["dd"] = feat, dd
        cache["cams"].append(cc)
    v = splat(frustums, plan)
    out = bev_encode(s2c(v), params.bev_convs, cache)
    return out, cache


def camera_backward(params: CameraStreamParams, plan: SplatPlan, cache: dict, g: np.ndarray) -> dict[str, ConvParams]:
    grads: dict[str, ConvParams] = {}
    gbev = bev_encode_backward(params.bev_convs, cache, g, grads)
    gfr = splat_backward(plan, c2s(gbev, plan.grid.nz))
    for cc, gf in zip(cache["cams"], gfr):
        gfeat, gdd = lift_backward(cc["feat"], cc["dd"], gf)
        glogit = softmax_backward(cc["dd"], gdd)
        gfeat2, gp = conv2d_backward(cc["feat"], params.depth_head, glogit)
        _acc(grads, "depth_head", gp)
        adp_backward(params, cc, gfeat + gfeat2, grads)
    return grads


def feature_pyramid(feat: np.ndarray, levels: int) -> list[np.ndarray]:
    """Stand-in for a multi-scale neck: level k is 2^k x 2^k average pooled."""
    out = [feat]
    for _ in range(1, levels):
        x = out[-1]
        h, w, c = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"cannot halve a {h}x{w} map")
        out.append(x.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3)))
    return out


def camera_bev(features: Sequence, cams: Sequence[CameraModel], grid: BEVGridSpec,
               params: CameraStreamParams, bins: DepthBins) -> np.ndarray:
    """F_Camera (X, Y, C_camera) for a set of cameras.

    ``features[i]`` is either one (H, W, C) map or a list of scales.
    """
    scales = [[f] if isinstance(f, np.ndarray) else list(f) for f in features]
    out, _ = camera_forward(scales, params, SplatPlan.build(cams, grid, bins))
    return out
