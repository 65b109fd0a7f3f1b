"""Finite-difference checks of every hand-written backward pass.

Each op is wrapped as ``(inputs) -> output`` plus an analytic
``(inputs, upstream) -> {name: grad}``. A fixed random projection ``R``
turns the output into the scalar ``sum(out * R)``; its analytic gradient is
the backward pass fed ``R`` and its numeric gradient is the central
difference of that scalar. Everything runs in float64.

ReLU is not differentiable at 0, so instances of the ops that contain one
are redrawn until every pre-activation sits at least ``KINK_MARGIN`` from it.

Relative error per entry is ``|a - n| / max(|a|, |n|, FLOOR)``. The floor
keeps entries whose true gradient is ~0 from dividing truncation noise by
nothing.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import camera_stream as cs
from . import lidar_stream
from .augmentation import Box3D
from .detection import build_targets, head_backward, head_forward, head_loss, HeadParams
from .fusion import (
    FusionParams,
    dynamic_fusion,
    fuse_adaptive,
    fuse_adaptive_backward,
    fuse_static,
    fusion_backward,
)
from .geometry import BEVGridSpec, surround_rig
from .rng import stream
from .tensor_ops import (
    ConvParams,
    backward,
    concat_channels,
    conv2d,
    global_avg_pool,
    pointwise,
    softmax_lastaxis,
)

STEP = 1e-4
FLOOR = 1e-6
OP_TOL = 1e-4
LOSS_TOL = 1e-3
INSTANCES = 20
MAX_ENTRIES = 24  # sampled entries per tensor for the larger composed ops

Inputs = dict[str, np.ndarray]


@dataclass
class OpResult:
    op: str
    max_rel_err: float
    tol: float
    instances: int
    worst: str  # "instance i, input name[index]"

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


@dataclass
class GradcheckReport:
    seed: int
    results: list[OpResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def failures(self) -> list[OpResult]:
        return [r for r in self.results if not r.passed]

    def lines(self) -> list[str]:
        out = []
        for r in self.results:
            status = "ok  " if r.passed else "FAIL"
            out.append(f"{status} {r.op:<18} max_rel_err={r.max_rel_err:.3e} tol={r.tol:.0e} "
                       f"n={r.instances} worst: {r.worst}")
        out.append(f"{'PASS' if self.passed else 'FAIL'}: {len(self.results) - len(self.failures())}"
                   f"/{len(self.results)} ops under tolerance (seed {self.seed})")
        return out


@dataclass
class _Case:
    """One op: build inputs from an rng, run forward, run backward."""
    name: str
    make: Callable[[np.random.Generator], tuple[Inputs, dict]]
    forward: Callable[[Inputs, dict], np.ndarray]
    grads: Callable[[Inputs, dict, np.ndarray], Inputs]
    tol: float = OP_TOL
    scalar: bool = False  # forward already returns the scalar loss
    max_entries: Optional[int] = None


def _rel_err(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), FLOOR)


def _entries(shape, rng, limit):
    total = int(np.prod(shape))
    if limit is None or total <= limit:
        return range(total)
    return np.sort(rng.choice(total, size=limit, replace=False))


def _check_case(case: _Case, seed: int, corrupt: bool) -> OpResult:
    worst, where = 0.0, "-"
    for i in range(INSTANCES):
        rng = stream(seed, "gradcheck", case.name, i)
        inputs, ctx = case.make(rng)
        out = case.forward(inputs, ctx)
        proj = None if case.scalar else rng.standard_normal(out.shape)

        def scalar(inp):
            y = case.forward(inp, ctx)
            return float(y) if case.scalar else float((y * proj).sum())

        analytic = case.grads(inputs, ctx, proj)
        for name, x in inputs.items():
            if name not in analytic:
                continue
            a = np.asarray(analytic[name], dtype=np.float64).reshape(x.shape)
            if corrupt:
                # negative control: a 5% error must be caught
                a = a * 1.05 + 1e-3
            flat = x.reshape(-1)
            for k in _entries(x.shape, rng, case.max_entries):
                orig = flat[k]
                flat[k] = orig + STEP
                up = scalar(inputs)
                flat[k] = orig - STEP
                down = scalar(inputs)
                flat[k] = orig
                num = (up - down) / (2 * STEP)
                err = float(_rel_err(a.reshape(-1)[k], num))
                if err > worst or not math.isfinite(err):
                    worst = err if math.isfinite(err) else math.inf
                    idx = ",".join(str(int(v)) for v in np.unravel_index(k, x.shape))
                    where = f"instance {i}, {name}[{idx}]"
    return OpResult(case.name, worst, case.tol, INSTANCES, where)


# ------------------------------------------------------------------ helpers

def _conv(rng, out_ch, in_ch, k) -> ConvParams:
    return ConvParams(rng.standard_normal((out_ch, in_ch, k, k)) * 0.5, rng.standard_normal(out_ch) * 0.1)


def _params_in(inp: Inputs, prefix: str) -> ConvParams:
    return ConvParams(inp[f"{prefix}.weight"], inp[f"{prefix}.bias"])


def _put(inp: Inputs, prefix: str, p: ConvParams) -> None:
    inp[f"{prefix}.weight"], inp[f"{prefix}.bias"] = p.weight, p.bias


KINK_MARGIN = 1e-2
KINK_TRIES = 500


def _clear_of_kinks(cache: dict) -> bool:
    """True if every ReLU pre-activation of the BEV encoder is off zero by the margin."""
    pre = cache["bev_acts"][1::2]
    return all(np.abs(a).min() > KINK_MARGIN for a in pre)


def _away_from_zero(x: np.ndarray, margin: float = 1e-2) -> np.ndarray:
    # keep relu inputs off the kink so the central difference is valid
    return np.where(np.abs(x) < margin, np.copysign(margin, x) + x, x)


# ------------------------------------------------------------------ tensor ops

def _case_conv2d() -> _Case:
    def make(rng):
        k = int(rng.choice([1, 3]))
        inp = {"x": rng.standard_normal((3, 3, 2))}
        _put(inp, "p", _conv(rng, 2, 2, k))
        return inp, {}

    def fwd(inp, ctx):
        return conv2d(inp["x"], _params_in(inp, "p"))

    def grads(inp, ctx, g):
        r = backward("conv2d", (inp["x"], _params_in(inp, "p")), g)
        return {"x": r["x"], "p.weight": r["weight"], "p.bias": r["bias"]}

    return _Case("conv2d", make, fwd, grads)


def _case_pointwise(fn: str) -> _Case:
    def make(rng):
        x = rng.standard_normal((3, 3, 2)) * 2
        return {"x": _away_from_zero(x) if fn == "relu" else x}, {}

    return _Case(f"pointwise.{fn}", make, lambda inp, ctx: pointwise(inp["x"], fn),
                 lambda inp, ctx, g: backward(fn, (inp["x"],), g))


def _case_gap() -> _Case:
    return _Case("global_avg_pool", lambda rng: ({"x": rng.standard_normal((3, 3, 2))}, {}),
                 lambda inp, ctx: global_avg_pool(inp["x"]),
                 lambda inp, ctx, g: backward("global_avg_pool", (inp["x"],), g))


def _case_concat() -> _Case:
    return _Case("concat_channels",
                 lambda rng: ({"a": rng.standard_normal((3, 3, 2)), "b": rng.standard_normal((3, 3, 1))}, {}),
                 lambda inp, ctx: concat_channels(inp["a"], inp["b"]),
                 lambda inp, ctx, g: backward("concat_channels", (inp["a"], inp["b"]), g))


def _case_softmax() -> _Case:
    return _Case("softmax_lastaxis", lambda rng: ({"x": rng.standard_normal((3, 3, 4)) * 2}, {}),
                 lambda inp, ctx: softmax_lastaxis(inp["x"]),
                 lambda inp, ctx, g: backward("softmax_lastaxis", (inp["x"],), g))


# ------------------------------------------------------------------ lidar

def _case_lidar_project() -> _Case:
    def make(rng):
        inp = {"hand": rng.standard_normal((3, 3, 5))}
        _put(inp, "proj", _conv(rng, 2, 5, 1))
        mask = (rng.random((3, 3, 1)) < 0.7).astype(np.float64)
        return inp, {"mask": mask}

    def fwd(inp, ctx):
        return lidar_stream.project(inp["hand"], ctx["mask"], _params_in(inp, "proj"))

    def grads(inp, ctx, g):
        gp = lidar_stream.project_backward(inp["hand"], ctx["mask"], _params_in(inp, "proj"), g)
        return {"proj.weight": gp.weight, "proj.bias": gp.bias}

    return _Case("lidar_project", make, fwd, grads)


# ------------------------------------------------------------------ camera

_C_IMG, _DBINS, _NSCALES = 3, 4, 2


def _small_rig():
    cams = surround_rig([0.0, math.pi], 8, 4, math.radians(70), 1.0)
    grid = BEVGridSpec(-6, 6, -6, 6, -1, 3, 2.0, 2)
    return cams, grid, cs.DepthBins(1.0, 9.0, _DBINS)


def _cam_params(rng, hidden=(3, 3, 3), c_camera=2, z=2) -> cs.CameraStreamParams:
    chain = [z * _C_IMG, *hidden, c_camera]
    return cs.CameraStreamParams(
        adp_scales=[_conv(rng, _C_IMG, _C_IMG, 1) for _ in range(_NSCALES)],
        adp_out=_conv(rng, _C_IMG, _NSCALES * _C_IMG, 1),
        depth_head=_conv(rng, _DBINS, _C_IMG, 1),
        bev_convs=[_conv(rng, o, i, 3) for i, o in zip(chain[:-1], chain[1:])])


def _cam_names(p: cs.CameraStreamParams) -> dict[str, ConvParams]:
    out = {f"adp_scales.{k}": c for k, c in enumerate(p.adp_scales)}
    out["adp_out"], out["depth_head"] = p.adp_out, p.depth_head
    out.update({f"bev_convs.{i}": c for i, c in enumerate(p.bev_convs)})
    return out


def _cam_from(inp: Inputs, template: cs.CameraStreamParams) -> cs.CameraStreamParams:
    n = len(template.adp_scales)
    get = lambda k: _params_in(inp, k)  # noqa: E731
    return cs.CameraStreamParams([get(f"adp_scales.{k}") for k in range(n)], get("adp_out"),
                                 get("depth_head"), [get(f"bev_convs.{i}") for i in range(4)])


def _case_adp() -> _Case:
    def make(rng):
        p = _cam_params(rng)
        inp = {"s0": rng.standard_normal((4, 4, _C_IMG)), "s1": rng.standard_normal((2, 2, _C_IMG))}
        for name, c in _cam_names(p).items():
            if name.startswith("adp"):
                _put(inp, name, c)
        return inp, {"p": p}

    def params(inp, ctx):
        p = ctx["p"]
        return cs.CameraStreamParams([_params_in(inp, f"adp_scales.{k}") for k in range(_NSCALES)],
                                     _params_in(inp, "adp_out"), p.depth_head, p.bev_convs)

    def fwd(inp, ctx):
        return cs.adp_fuse([inp["s0"], inp["s1"]], params(inp, ctx))

    def grads(inp, ctx, g):
        cache: dict = {}
        p = params(inp, ctx)
        cs.adp_fuse([inp["s0"], inp["s1"]], p, cache)
        out: dict = {}
        cs.adp_backward(p, cache, g, out)
        return {f"{k}.{f}": getattr(v, f) for k, v in out.items() for f in ("weight", "bias")}

    return _Case("adp_fuse", make, fwd, grads)


def _case_predict_depth() -> _Case:
    bins = cs.DepthBins(1.0, 9.0, _DBINS)

    def make(rng):
        p = _cam_params(rng)
        inp = {"feat": rng.standard_normal((3, 3, _C_IMG))}
        _put(inp, "depth_head", p.depth_head)
        return inp, {"p": p}

    def params(inp, ctx):
        p = ctx["p"]
        return cs.CameraStreamParams(p.adp_scales, p.adp_out, _params_in(inp, "depth_head"), p.bev_convs)

    def fwd(inp, ctx):
        return cs.predict_depth(inp["feat"], params(inp, ctx), bins).data

    def grads(inp, ctx, g):
        p = params(inp, ctx)
        glogit = backward("softmax_lastaxis", (conv2d(inp["feat"], p.depth_head),), g)["x"]
        r = backward("conv2d", (inp["feat"], p.depth_head), glogit)
        return {"feat": r["x"], "depth_head.weight": r["weight"], "depth_head.bias": r["bias"]}

    return _Case("predict_depth", make, fwd, grads)


def _case_lift() -> _Case:
    def make(rng):
        dd = softmax_lastaxis(rng.standard_normal((3, 3, _DBINS)))
        return {"feat": rng.standard_normal((3, 3, 2)), "dd": dd}, {}

    def grads(inp, ctx, g):
        gf, gd = cs.lift_backward(inp["feat"], inp["dd"], g)
        return {"feat": gf, "dd": gd}

    return _Case("lift", make, lambda inp, ctx: cs.lift(inp["feat"], inp["dd"]), grads)


def _case_splat() -> _Case:
    cams, grid, bins = _small_rig()
    plan = cs.SplatPlan.build(cams, grid, bins)

    def make(rng):
        inp = {f"f{i}": rng.standard_normal((c.height, c.width, bins.n, 2)) for i, c in enumerate(cams)}
        return inp, {}

    def fwd(inp, ctx):
        return cs.splat([inp[f"f{i}"] for i in range(len(cams))], plan)

    def grads(inp, ctx, g):
        return {f"f{i}": gi for i, gi in enumerate(cs.splat_backward(plan, g))}

    return _Case("splat", make, fwd, grads, max_entries=MAX_ENTRIES)


def _case_s2c() -> _Case:
    return _Case("s2c", lambda rng: ({"v": rng.standard_normal((3, 3, 2, 2))}, {}),
                 lambda inp, ctx: cs.s2c(inp["v"]),
                 lambda inp, ctx, g: {"v": cs.c2s(g, 2)})


def _case_bev_encode() -> _Case:
    def make(rng):
        for _ in range(KINK_TRIES):
            p = _cam_params(rng)
            inp = {"bev": rng.standard_normal((3, 3, 2 * _C_IMG))}
            cache: dict = {}
            cs.bev_encode(inp["bev"], p.bev_convs, cache)
            if _clear_of_kinks(cache):
                break
        else:
            raise RuntimeError("bev_encode: no kink-free instance found")
        for i, c in enumerate(p.bev_convs):
            _put(inp, f"bev_convs.{i}", c)
        return inp, {}

    def convs(inp):
        return [_params_in(inp, f"bev_convs.{i}") for i in range(4)]

    def grads(inp, ctx, g):
        cache: dict = {}
        out: dict = {}
        cs.bev_encode(inp["bev"], convs(inp), cache)
        gx = cs.bev_encode_backward(convs(inp), cache, g, out)
        res = {f"{k}.{f}": getattr(v, f) for k, v in out.items() for f in ("weight", "bias")}
        res["bev"] = gx
        return res

    return _Case("bev_encode", make, lambda inp, ctx: cs.bev_encode(inp["bev"], convs(inp)), grads,
                 max_entries=MAX_ENTRIES)


def _case_camera_bev() -> _Case:
    cams, grid, bins = _small_rig()
    plan = cs.SplatPlan.build(cams, grid, bins)

    def make(rng):
        for _ in range(KINK_TRIES):
            p = _cam_params(rng)
            feats = [cs.feature_pyramid(rng.standard_normal((c.height, c.width, _C_IMG)), _NSCALES)
                     for c in cams]
            if _clear_of_kinks(cs.camera_forward(feats, p, plan)[1]):
                break
        else:
            raise RuntimeError("camera_bev: no kink-free instance found")
        inp: Inputs = {}
        for name, c in _cam_names(p).items():
            _put(inp, name, c)
        return inp, {"p": p, "feats": feats}

    def fwd(inp, ctx):
        out, _ = cs.camera_forward(ctx["feats"], _cam_from(inp, ctx["p"]), plan)
        return out

    def grads(inp, ctx, g):
        p = _cam_from(inp, ctx["p"])
        _, cache = cs.camera_forward(ctx["feats"], p, plan)
        out = cs.camera_backward(p, plan, cache, g)
        return {f"{k}.{f}": getattr(v, f) for k, v in out.items() for f in ("weight", "bias")}

    # sixteen parameter tensors, so fewer samples each
    return _Case("camera_bev", make, fwd, grads, max_entries=8)


# ------------------------------------------------------------------ fusion

def _fusion_case(name: str, afs: bool, adaptive_only: bool = False) -> _Case:
    c_cam = c_lid = 2

    def make(rng):
        inp = {"f_lidar": rng.standard_normal((3, 3, c_lid))}
        if not adaptive_only:
            inp["f_cam"] = rng.standard_normal((3, 3, c_cam))
            _put(inp, "static_conv", _conv(rng, c_lid, c_cam + c_lid, 3))
        _put(inp, "gate", _conv(rng, c_lid, c_lid, 1))
        return inp, {}

    def params(inp):
        static = _params_in(inp, "static_conv") if not adaptive_only else ConvParams.zeros(c_lid, c_cam + c_lid, 3)
        return FusionParams(static, _params_in(inp, "gate"), afs)

    def fwd(inp, ctx):
        p = params(inp)
        if adaptive_only:
            return fuse_adaptive(inp["f_lidar"], p)
        if name == "fuse_static":
            return fuse_static(inp["f_cam"], inp["f_lidar"], p)
        return dynamic_fusion(inp["f_cam"], inp["f_lidar"], p)

    def grads(inp, ctx, g):
        p = params(inp)
        if adaptive_only:
            gf, gg = fuse_adaptive_backward(inp["f_lidar"], p, g)
            return {"f_lidar": gf, "gate.weight": gg.weight, "gate.bias": gg.bias}
        gc, gl, gp = fusion_backward(inp["f_cam"], inp["f_lidar"], p, g)
        out = {"f_cam": gc, "f_lidar": gl,
               "static_conv.weight": gp["static_conv"].weight, "static_conv.bias": gp["static_conv"].bias}
        if afs:
            out["gate.weight"], out["gate.bias"] = gp["gate"].weight, gp["gate"].bias
        return out

    return _Case(name, make, fwd, grads)


# ------------------------------------------------------------------ head

_HEAD_GRID = BEVGridSpec(-3, 3, -3, 3, -1, 3, 1.0, 1)


def _head_inputs(rng, c_in=2, k=2):
    inp = {"f": rng.standard_normal((_HEAD_GRID.nx, _HEAD_GRID.ny, c_in))}
    hp = HeadParams(_conv(rng, k, c_in, 3), _conv(rng, 6, c_in, 3))
    _put(inp, "heatmap_conv", hp.heatmap_conv)
    _put(inp, "reg_conv", hp.reg_conv)
    return inp


def _head_from(inp) -> HeadParams:
    return HeadParams(_params_in(inp, "heatmap_conv"), _params_in(inp, "reg_conv"))


def _case_head_forward() -> _Case:
    def fwd(inp, ctx):
        heat, regs = head_forward(inp["f"], _head_from(inp))
        return np.concatenate([heat, regs], axis=-1)

    def grads(inp, ctx, g):
        hp = _head_from(inp)
        heat, _ = head_forward(inp["f"], hp)
        gf, gp = head_backward(inp["f"], hp, heat, g[..., :hp.num_classes], g[..., hp.num_classes:])
        out = {"f": gf}
        for k, v in gp.items():
            out[f"{k}.weight"], out[f"{k}.bias"] = v.weight, v.bias
        return out

    return _Case("head_forward", lambda rng: (_head_inputs(rng), {}), fwd, grads, max_entries=MAX_ENTRIES)


def _random_boxes(rng, n=2, k=2) -> list[Box3D]:
    out = []
    for i in range(n):
        c = (float(rng.uniform(-2.4, 2.4)), float(rng.uniform(-2.4, 2.4)), 0.8)
        out.append(Box3D(c, (float(rng.uniform(1, 3)), float(rng.uniform(1, 2)), 1.6),
                         float(rng.uniform(-3, 3)), int(rng.integers(k))))
    return out


def _case_head_loss() -> _Case:
    def make(rng):
        boxes = _random_boxes(rng)
        return _head_inputs(rng), {"boxes": boxes, "targets": build_targets(boxes, _HEAD_GRID, 2)}

    def fwd(inp, ctx):
        heat, regs = head_forward(inp["f"], _head_from(inp))
        return np.float64(head_loss(heat, regs, ctx["boxes"], _HEAD_GRID, 1.0, ctx["targets"])[0])

    def grads(inp, ctx, _):
        hp = _head_from(inp)
        heat, regs = head_forward(inp["f"], hp)
        _, gh, gr = head_loss(heat, regs, ctx["boxes"], _HEAD_GRID, 1.0, ctx["targets"])
        gf, gp = head_backward(inp["f"], hp, heat, gh, gr)
        out = {"f": gf}
        for k, v in gp.items():
            out[f"{k}.weight"], out[f"{k}.bias"] = v.weight, v.bias
        return out

    return _Case("head_loss", make, fwd, grads, tol=LOSS_TOL, scalar=True, max_entries=MAX_ENTRIES)


# ------------------------------------------------------------------ entry point

def all_cases() -> list[_Case]:
    return [
        _case_conv2d(), _case_pointwise("sigmoid"), _case_pointwise("relu"), _case_gap(), _case_concat(),
        _case_softmax(), _case_lidar_project(), _case_adp(), _case_predict_depth(), _case_lift(),
        _case_splat(), _case_s2c(), _case_bev_encode(), _case_camera_bev(),
        _fusion_case("fuse_static", afs=False), _fusion_case("fuse_adaptive", afs=True, adaptive_only=True),
        _fusion_case("dynamic_fusion", afs=True), _case_head_forward(), _case_head_loss(),
    ]


def run_gradcheck(seed: int = 0, corrupt: Optional[str] = None, only: Optional[set[str]] = None) -> GradcheckReport:
    """Run every suite; ``corrupt`` names an op whose analytic grad is perturbed (test hook)."""
    t0 = time.perf_counter()
    report = GradcheckReport(seed)
    for case in all_cases():
        if only is not None and case.name not in only:
            continue
        report.results.append(_check_case(case, seed, corrupt == case.name))
    report.seconds = time.perf_counter() - t0
    return report
