"""Parameter bundle and end-to-end forward/backward for one configured detector."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import lidar_stream
from .augmentation import Box3D
from .camera_stream import CameraStreamParams, SplatPlan, camera_backward, camera_forward, feature_pyramid
from .config import ExperimentConfig
from .detection import HeadParams, Targets, build_targets, decode, head_backward, head_forward, head_loss
from .fusion import FusionParams, dynamic_fusion, fusion_backward
from .lidar_stream import PointCloud
from .rng import stream
from .tensor_ops import ConvParams, load_params, save_params


@dataclass
class SceneInputs:
    """Everything the network consumes for one scene, precomputed once."""
    lidar_hand: Optional[np.ndarray]
    lidar_mask: Optional[np.ndarray]
    camera: Optional[list[list[np.ndarray]]]  # per camera, list of pyramid levels
    boxes: list[Box3D]
    targets: Targets


def prepare_inputs(cfg: ExperimentConfig, cloud: PointCloud, features: Sequence[np.ndarray],
                   boxes: Sequence[Box3D]) -> SceneInputs:
    grid = cfg.grid_spec()
    hand = mask = cams = None
    if cfg.streams in ("lidar_only", "fused"):
        hand, mask = lidar_stream.hand_features(cloud, grid, cfg.lidar_mode)
    if cfg.streams in ("camera_only", "fused"):
        cams = [feature_pyramid(np.asarray(f, dtype=np.float32), cfg.cameras.pyramid_levels) for f in features]
    return SceneInputs(hand, mask, cams, list(boxes), build_targets(boxes, grid, cfg.channels.num_classes))


class Model:
    def __init__(self, cfg: ExperimentConfig, params: dict[str, ConvParams]):
        self.cfg = cfg
        self.grid = cfg.grid_spec()
        self.params = params
        self._plan: Optional[SplatPlan] = None

    # ---------------------------------------------------------- construction

    @classmethod
    def init(cls, cfg: ExperimentConfig, seed: Optional[int] = None) -> "Model":
        rng = stream(cfg.train.seed if seed is None else seed, "init")
        ch, grid = cfg.channels, cfg.grid_spec()
        p: dict[str, ConvParams] = {}
        uses_cam = cfg.streams in ("camera_only", "fused")
        uses_lidar = cfg.streams in ("lidar_only", "fused")
        if uses_cam:
            cam = CameraStreamParams.init(ch.c_image, cfg.cameras.pyramid_levels, cfg.cameras.depth_bins,
                                          grid.nz, ch.bev_hidden, ch.c_camera, rng)
            for k, conv in enumerate(cam.adp_scales):
                p[f"camera.adp_scales.{k}"] = conv
            p["camera.adp_out"] = cam.adp_out
            p["camera.depth_head"] = cam.depth_head
            for i, conv in enumerate(cam.bev_convs):
                p[f"camera.bev_convs.{i}"] = conv
        if uses_lidar:
            p["lidar.proj"] = ConvParams.init(ch.c_lidar, lidar_stream.input_channels(cfg.lidar_mode, grid), 1, rng)
        if cfg.streams == "fused":
            fp = FusionParams.init(ch.c_camera, ch.c_lidar, rng, cfg.fusion.afs_enabled)
            p["fusion.static_conv"], p["fusion.gate"] = fp.static_conv, fp.gate
        c_head = ch.c_camera if cfg.streams == "camera_only" else ch.c_lidar
        hp = HeadParams.init(c_head, ch.num_classes, rng, cfg.head.heatmap_prior)
        p["head.heatmap_conv"], p["head.reg_conv"] = hp.heatmap_conv, hp.reg_conv
        return cls(cfg, p)

    # ---------------------------------------------------------- views

    @property
    def camera_params(self) -> CameraStreamParams:
        p = self.params
        return CameraStreamParams(
            adp_scales=[p[f"camera.adp_scales.{k}"] for k in range(self.cfg.cameras.pyramid_levels)],
            adp_out=p["camera.adp_out"], depth_head=p["camera.depth_head"],
            bev_convs=[p[f"camera.bev_convs.{i}"] for i in range(4)])

    @property
    def fusion_params(self) -> FusionParams:
        return FusionParams(self.params["fusion.static_conv"], self.params["fusion.gate"],
                            self.cfg.fusion.afs_enabled)

    @property
    def head_params(self) -> HeadParams:
        return HeadParams(self.params["head.heatmap_conv"], self.params["head.reg_conv"])

    @property
    def plan(self) -> SplatPlan:
        if self._plan is None:
            self._plan = SplatPlan.build(self.cfg.rig(), self.grid, self.cfg.depth_bins())
        return self._plan

    # ---------------------------------------------------------- flat parameter access

    def flat(self) -> dict[str, np.ndarray]:
        out = {}
        for name in sorted(self.params):
            out[f"{name}.weight"] = self.params[name].weight
            out[f"{name}.bias"] = self.params[name].bias
        return out

    def copy(self, cfg: Optional[ExperimentConfig] = None) -> "Model":
        """Independent copy, optionally under another config with the same layout (e.g. for fine-tuning)."""
        return Model(cfg or self.cfg, {k: ConvParams(v.weight.copy(), v.bias.copy()) for k, v in self.params.items()})

    def save(self, path) -> None:
        save_params(path, self.flat())

    @classmethod
    def load(cls, cfg: ExperimentConfig, path) -> "Model":
        model = cls.init(cfg)
        flat = load_params(path)
        expected = model.flat()
        if set(flat) != set(expected):
            missing = sorted(set(expected) - set(flat))
            extra = sorted(set(flat) - set(expected))
            raise ValueError(f"{path}: parameters do not match config (missing {missing}, unexpected {extra})")
        for name, arr in flat.items():
            if arr.shape != expected[name].shape:
                raise ValueError(f"{path}: {name} has shape {arr.shape}, config needs {expected[name].shape}")
        for name in model.params:
            model.params[name] = ConvParams(flat[f"{name}.weight"], flat[f"{name}.bias"])
        return model

    # ---------------------------------------------------------- forward / backward

    def forward(self, inp: SceneInputs):
        cache: dict = {}
        streams = self.cfg.streams
        f_lidar = f_cam = None
        if streams in ("lidar_only", "fused"):
            f_lidar = lidar_stream.project(inp.lidar_hand, inp.lidar_mask, self.params["lidar.proj"])
        if streams in ("camera_only", "fused"):
            f_cam, cache["camera"] = camera_forward(inp.camera, self.camera_params, self.plan)
        if streams == "fused":
            feat = dynamic_fusion(f_cam, f_lidar, self.fusion_params)
        else:
            feat = f_lidar if streams == "lidar_only" else f_cam
        heat, regs = head_forward(feat, self.head_params)
        cache.update(f_lidar=f_lidar, f_cam=f_cam, feat=feat, heat=heat)
        return heat, regs, cache

    def backward(self, inp: SceneInputs, cache: dict, g_heat: np.ndarray, g_reg: np.ndarray) -> dict[str, ConvParams]:
        grads: dict[str, ConvParams] = {}
        gfeat, gh = head_backward(cache["feat"], self.head_params, cache["heat"], g_heat, g_reg)
        grads["head.heatmap_conv"], grads["head.reg_conv"] = gh["heatmap_conv"], gh["reg_conv"]
        streams = self.cfg.streams
        g_cam = g_lidar = None
        if streams == "fused":
            g_cam, g_lidar, gf = fusion_backward(cache["f_cam"], cache["f_lidar"], self.fusion_params, gfeat)
            grads["fusion.static_conv"], grads["fusion.gate"] = gf["static_conv"], gf["gate"]
        elif streams == "lidar_only":
            g_lidar = gfeat
        else:
            g_cam = gfeat
        if g_lidar is not None:
            grads["lidar.proj"] = lidar_stream.project_backward(
                inp.lidar_hand, inp.lidar_mask, self.params["lidar.proj"], g_lidar)
        if g_cam is not None:
            for name, gp in camera_backward(self.camera_params, self.plan, cache["camera"], g_cam).items():
                grads[f"camera.{name}"] = gp
        return grads

    def loss_and_grads(self, inp: SceneInputs):
        heat, regs, cache = self.forward(inp)
        loss, g_heat, g_reg = head_loss(heat, regs, inp.boxes, self.grid, self.cfg.head.reg_weight, inp.targets)
        return loss, self.backward(inp, cache, g_heat, g_reg)

    def detect(self, inp: SceneInputs):
        heat, regs, _ = self.forward(inp)
        e = self.cfg.eval
        return decode(heat, regs, self.grid, e.score_thresh, e.max_dets, self.cfg.head.class_dz)
