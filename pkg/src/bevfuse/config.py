"""Experiment configuration: a sectioned TOML file with a closed key set.

Unknown sections or keys are rejected so typos fail loudly. Every section
has defaults; an empty file gives the default synthetic benchmark.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .augmentation import CAMERA_MODES, MalfunctionSpec
from .camera_stream import DepthBins
from .geometry import BEVGridSpec, surround_rig
from .lidar_stream import MODES as LIDAR_MODES
from .synthetic import DEFAULT_YAWS, SceneSpec

STREAMS = ("camera_only", "lidar_only", "fused")


class ConfigError(ValueError):
    pass


@dataclass
class GridSection:
    x_min: float = -24.0
    x_max: float = 24.0
    y_min: float = -24.0
    y_max: float = 24.0
    z_min: float = -1.0
    z_max: float = 3.0
    cell_xy: float = 1.0
    z_bins: int = 2


@dataclass
class CamerasSection:
    yaws: list = field(default_factory=lambda: list(DEFAULT_YAWS))
    width: int = 48
    height: int = 12
    hfov_deg: float = 64.0
    mount_height: float = 1.5
    d_min: float = 1.0
    d_max: float = 33.0
    depth_bins: int = 16
    front_index: int = 0
    pyramid_levels: int = 2


@dataclass
class ChannelsSection:
    c_image: int = 16
    c_camera: int = 16
    c_lidar: int = 64
    num_classes: int = 2
    bev_hidden: list = field(default_factory=lambda: [32, 32, 32])


@dataclass
class FusionSection:
    afs_enabled: bool = True


@dataclass
class HeadSection:
    class_dz: list = field(default_factory=lambda: [1.6, 1.75])
    reg_weight: float = 1.0
    heatmap_prior: float = 0.1


@dataclass
class SceneSection:
    n_objects: list = field(default_factory=lambda: [4, 10])
    size_ranges: list = field(default_factory=lambda: [
        [[3.8, 4.8], [1.7, 2.1], [1.4, 1.8]],
        [[0.6, 1.0], [0.6, 1.0], [1.6, 1.9]]])
    class_intensity: list = field(default_factory=lambda: [0.7, 0.35])
    region: list = field(default_factory=lambda: [-22.0, 22.0, -22.0, 22.0])
    min_range: float = 4.0
    points_per_object: list = field(default_factory=lambda: [30, 80])
    ground_points: int = 3000
    ground: bool = True
    depth_cue_channels: int = 8
    feature_noise: float = 0.05
    train_scenes: int = 100
    eval_scenes: int = 50


@dataclass
class MalfunctionSection:
    fov: Optional[list] = None
    object_dropout: Optional[list] = None
    camera_mode: str = "none"
    stuck_prob: float = 0.5
    seed: Optional[int] = None


@dataclass
class TrainSection:
    learning_rate: float = 0.05
    iterations: int = 300
    batch: int = 4
    seed: int = 0
    freeze: list = field(default_factory=list)
    grad_clip: float = 5.0
    augment: bool = False


@dataclass
class EvalSection:
    thresholds: list = field(default_factory=lambda: [0.5, 1.0, 2.0, 4.0])
    score_thresh: float = 0.1
    max_dets: int = 100
    distance_buckets: list = field(default_factory=lambda: [15.0, 30.0])


_SECTIONS = {
    "grid": GridSection, "cameras": CamerasSection, "channels": ChannelsSection,
    "fusion": FusionSection, "head": HeadSection, "scene": SceneSection,
    "malfunction": MalfunctionSection, "train": TrainSection, "eval": EvalSection,
}


@dataclass
class ExperimentConfig:
    seed: int = 7
    lidar_mode: str = "pillar"
    streams: str = "fused"
    grid: GridSection = field(default_factory=GridSection)
    cameras: CamerasSection = field(default_factory=CamerasSection)
    channels: ChannelsSection = field(default_factory=ChannelsSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    head: HeadSection = field(default_factory=HeadSection)
    scene: SceneSection = field(default_factory=SceneSection)
    malfunction: MalfunctionSection = field(default_factory=MalfunctionSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # ---------------------------------------------------------- derived objects

    def grid_spec(self) -> BEVGridSpec:
        return BEVGridSpec(**dataclasses.asdict(self.grid))

    def depth_bins(self) -> DepthBins:
        return DepthBins(self.cameras.d_min, self.cameras.d_max, self.cameras.depth_bins)

    def rig(self):
        c = self.cameras
        return surround_rig(c.yaws, c.width, c.height, math.radians(c.hfov_deg), c.mount_height)

    def malfunction_spec(self) -> MalfunctionSpec:
        m = self.malfunction
        return MalfunctionSpec(
            fov=tuple(m.fov) if m.fov is not None else None,
            object_dropout=tuple(m.object_dropout) if m.object_dropout is not None else None,
            camera_mode=m.camera_mode, stuck_prob=m.stuck_prob,
            seed=self.seed if m.seed is None else m.seed)

    def scene_spec(self) -> SceneSpec:
        s, c = self.scene, self.cameras
        return SceneSpec(
            n_objects=tuple(s.n_objects), num_classes=self.channels.num_classes,
            size_ranges=tuple(tuple(tuple(r) for r in cls) for cls in s.size_ranges),
            class_intensity=tuple(s.class_intensity), region=tuple(s.region), min_range=s.min_range,
            points_per_object=tuple(s.points_per_object), ground_points=s.ground_points, ground=s.ground,
            ground_extent=(self.grid.x_min, self.grid.x_max, self.grid.y_min, self.grid.y_max),
            rig_yaws=tuple(c.yaws), image_width=c.width, image_height=c.height,
            hfov=math.radians(c.hfov_deg), mount_height=c.mount_height, c_image=self.channels.c_image,
            depth_cue_channels=s.depth_cue_channels, depth_cue_range=(c.d_min, c.d_max),
            feature_noise=s.feature_noise, seed=self.seed)

    # ---------------------------------------------------------- serialization

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"fusion.afs_enabled": False})``."""
        d = self.to_dict()
        for key, value in changes.items():
            node = d
            *parents, leaf = key.split(".")
            for p in parents:
                node = node[p]
            if leaf not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[leaf] = value
        return from_dict(d)

    def validate(self) -> None:
        problems = []
        try:
            self.grid_spec()
        except ValueError as e:
            problems.append(f"grid: {e}")
        try:
            self.depth_bins()
        except ValueError as e:
            problems.append(f"cameras.d_min/d_max/depth_bins: {e}")
        if self.lidar_mode not in LIDAR_MODES:
            problems.append(f"lidar_mode: {self.lidar_mode!r} not in {LIDAR_MODES}")
        if self.streams not in STREAMS:
            problems.append(f"streams: {self.streams!r} not in {STREAMS}")
        ch = self.channels
        if len(ch.bev_hidden) != 3:
            problems.append(f"channels.bev_hidden: need 3 widths for the four BEV convs, got {ch.bev_hidden}")
        if min(ch.c_image, ch.c_camera, ch.c_lidar, ch.num_classes) < 1:
            problems.append("channels: all channel counts must be >= 1")
        if len(self.head.class_dz) != ch.num_classes:
            problems.append(f"head.class_dz: need {ch.num_classes} entries, got {len(self.head.class_dz)}")
        if len(self.scene.size_ranges) != ch.num_classes:
            problems.append(f"scene.size_ranges: need {ch.num_classes} entries")
        if len(self.scene.class_intensity) != ch.num_classes:
            problems.append(f"scene.class_intensity: need {ch.num_classes} entries")
        if not 0 <= self.scene.depth_cue_channels < ch.c_image:
            problems.append("scene.depth_cue_channels must be in [0, channels.c_image)")
        cam = self.cameras
        if not 0 <= cam.front_index < len(cam.yaws):
            problems.append(f"cameras.front_index {cam.front_index} outside the {len(cam.yaws)}-camera rig")
        f = 2 ** (cam.pyramid_levels - 1)
        if cam.pyramid_levels < 1 or cam.width % f or cam.height % f:
            problems.append(f"cameras.width/height must be divisible by 2^(pyramid_levels-1) = {f}")
        m = self.malfunction
        if m.camera_mode not in CAMERA_MODES:
            problems.append(f"malfunction.camera_mode: {m.camera_mode!r} not in {CAMERA_MODES}")
        try:
            self.malfunction_spec()
        except (ValueError, TypeError) as e:
            problems.append(f"malfunction: {e}")
        bad = [p for p in self.train.freeze if p not in ("camera", "lidar", "fusion", "head")]
        if bad:
            problems.append(f"train.freeze: unknown modules {bad}")
        if self.train.batch < 1 or self.train.iterations < 0 or self.train.learning_rate < 0:
            problems.append("train: batch >= 1, iterations >= 0 and learning_rate >= 0 required")
        if sorted(self.eval.distance_buckets) != list(self.eval.distance_buckets):
            problems.append("eval.distance_buckets must be sorted")
        if any(t <= 0 for t in self.eval.thresholds):
            problems.append("eval.thresholds must be positive")
        if problems:
            raise ConfigError("invalid config:\n  " + "\n  ".join(problems))


def _section(cls, name: str, data: dict) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"[{name}]: unknown keys {unknown}; allowed: {sorted(known)}")
    return cls(**data)


def from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(d) - top)
    if unknown:
        raise ConfigError(f"unknown top-level keys/sections {unknown}; allowed: {sorted(top)}")
    kwargs = {}
    for key, value in d.items():
        kwargs[key] = _section(_SECTIONS[key], key, value) if key in _SECTIONS else value
    cfg = ExperimentConfig(**kwargs)
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        data = tomllib.loads(Path(path).read_text())
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    return from_dict(data)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot write {type(v).__name__} to TOML")


def dump_config(cfg: ExperimentConfig) -> str:
    d = cfg.to_dict()
    lines = [f"{k} = {_toml_value(v)}" for k, v in d.items() if k not in _SECTIONS]
    for name in _SECTIONS:
        lines.append(f"\n[{name}]")
        lines.extend(f"{k} = {_toml_value(v)}" for k, v in d[name].items() if v is not None)
    return "\n".join(lines) + "\n"
