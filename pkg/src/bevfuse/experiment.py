"""Dataset loading, malfunction application, training and evaluation runs."""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .augmentation import MalfunctionSpec, camera_malfunction, drop_object_points, limit_fov
from .config import ExperimentConfig
from .metrics import Frame, MetricsReport, evaluate
from .model import Model, SceneInputs, prepare_inputs
from .rng import stream
from .synthetic import Manifest, Scene, read_scene
from .tensor_ops import ConvParams, NonFiniteError

log = logging.getLogger(__name__)


class ValidationError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


# ------------------------------------------------------------------ datasets

def check_dataset(cfg: ExperimentConfig, manifest: Manifest) -> None:
    """Raise if the dataset was generated for a different rig or channel layout."""
    problems = []
    rig = cfg.rig()
    if len(rig) != len(manifest.cameras):
        problems.append(f"cameras.yaws: config has {len(rig)} cameras, dataset has {len(manifest.cameras)}")
    else:
        for i, (a, b) in enumerate(zip(rig, manifest.cameras)):
            if (a.width, a.height) != (b.width, b.height):
                problems.append(f"cameras.width/height: camera {i} is {b.width}x{b.height} in the dataset")
            elif not (np.allclose([a.fx, a.fy, a.cx, a.cy], [b.fx, b.fy, b.cx, b.cy], atol=1e-6)
                      and np.allclose(a.pose, b.pose, atol=1e-6)):
                problems.append(f"cameras.yaws/hfov_deg/mount_height: camera {i} calibration differs from the dataset")
    spec = manifest.spec
    if spec.c_image != cfg.channels.c_image:
        problems.append(f"channels.c_image: config {cfg.channels.c_image}, dataset {spec.c_image}")
    if spec.num_classes != cfg.channels.num_classes:
        problems.append(f"channels.num_classes: config {cfg.channels.num_classes}, dataset {spec.num_classes}")
    if problems:
        raise ValidationError("config does not match dataset:\n  " + "\n  ".join(problems))


def load_scenes(cfg: ExperimentConfig, data_dir) -> tuple[Manifest, list[Scene]]:
    manifest = Manifest.load(data_dir)
    check_dataset(cfg, manifest)
    scenes = [read_scene(data_dir, k, len(manifest.cameras)) for k in range(manifest.num_scenes)]
    return manifest, scenes


# ------------------------------------------------------------------ malfunctions

def corrupt_scene(scene: Scene, spec: MalfunctionSpec, scene_index: int, front_index: int,
                  previous: Optional[Scene] = None, key: Sequence = ()) -> tuple:
    """Apply ``spec`` to one scene; returns ``(cloud, camera_features)``.

    The random stream is a pure function of (spec.seed, key, scene_index).
    Stuck cameras reuse the previous scene's features (the scene itself for
    the first one).
    """
    rng = stream(spec.seed, "malfunction", *key, scene_index)
    cloud = scene.cloud
    if spec.fov is not None:
        cloud = limit_fov(cloud, spec.fov)
    if spec.object_dropout is not None:
        cloud = drop_object_points(cloud, scene.boxes, spec, rng)
    prev = (previous or scene).camera_features
    feats = camera_malfunction(scene.camera_features, front_index, spec.camera_mode, spec.stuck_prob, prev, rng)
    return cloud, feats


def scene_inputs(cfg: ExperimentConfig, scenes: Sequence[Scene], index: int,
                 spec: Optional[MalfunctionSpec] = None, key: Sequence = ()) -> SceneInputs:
    scene = scenes[index]
    if spec is None or spec.is_clean:
        cloud, feats = scene.cloud, scene.camera_features
    else:
        prev = scenes[index - 1] if index > 0 else None
        cloud, feats = corrupt_scene(scene, spec, index, cfg.cameras.front_index, prev, key)
    return prepare_inputs(cfg, cloud, feats, scene.boxes)


# ------------------------------------------------------------------ training

@dataclass
class TrainResult:
    model: Model
    losses: list[float]
    seconds: float


def _frozen(name: str, freeze: Sequence[str]) -> bool:
    return name.split(".", 1)[0] in freeze


def train_toy(cfg: ExperimentConfig, data_dir, model: Optional[Model] = None,
              scenes: Optional[list[Scene]] = None) -> TrainResult:
    """Plain SGD on the head loss over all trainable parameters.

    Each iteration averages gradients over ``train.batch`` scenes drawn from a
    seeded stream. Gradients are clipped to ``train.grad_clip`` global norm
    (0 disables clipping).
    """
    t0 = time.perf_counter()
    tc = cfg.train
    if scenes is None:
        _, scenes = load_scenes(cfg, data_dir)
    if not scenes:
        raise TrainingError("training set is empty")
    model = model or Model.init(cfg)
    clean = [scene_inputs(cfg, scenes, k) for k in range(len(scenes))]
    aug_spec = cfg.malfunction_spec() if tc.augment else None
    losses = []
    for it in range(tc.iterations):
        picks = stream(tc.seed, "batch", it).integers(len(scenes), size=tc.batch)
        total = 0.0
        acc: dict[str, ConvParams] = {}
        for slot, k in enumerate(picks):
            inp = clean[k]
            if aug_spec is not None and not aug_spec.is_clean:
                inp = scene_inputs(cfg, scenes, int(k), aug_spec, key=("train", it, slot))
            try:
                loss, grads = model.loss_and_grads(inp)
            except NonFiniteError as e:
                raise TrainingError(f"non-finite values at iteration {it}: {e}") from None
            if not math.isfinite(loss):
                raise TrainingError(f"loss diverged (NaN/Inf) at iteration {it}")
            total += loss
            for name, g in grads.items():
                if name in acc:
                    acc[name].weight += g.weight
                    acc[name].bias += g.bias
                else:
                    acc[name] = ConvParams(g.weight.astype(np.float64), g.bias.astype(np.float64))
        losses.append(total / tc.batch)
        scale = 1.0 / tc.batch
        if tc.grad_clip > 0:
            norm = math.sqrt(sum(float((g.weight ** 2).sum() + (g.bias ** 2).sum()) for g in acc.values())) * scale
            if norm > tc.grad_clip:
                scale *= tc.grad_clip / norm
        for name, g in acc.items():
            if _frozen(name, tc.freeze):
                continue
            p = model.params[name]
            p.weight -= (tc.learning_rate * scale * g.weight).astype(np.float32)
            p.bias -= (tc.learning_rate * scale * g.bias).astype(np.float32)
        if it % 50 == 0 or it == tc.iterations - 1:
            log.info("iter %d loss %.4f", it, losses[-1])
    return TrainResult(model, losses, time.perf_counter() - t0)


# ------------------------------------------------------------------ evaluation

def _detect_range(args):
    cfg, data_dir, model_flat, indices = args
    model = _model_from_flat(cfg, model_flat)
    _, scenes = load_scenes(cfg, data_dir)
    return _detect(cfg, model, scenes, indices)


def _model_from_flat(cfg, flat):
    model = Model.init(cfg)
    for name in model.params:
        model.params[name] = ConvParams(flat[f"{name}.weight"], flat[f"{name}.bias"])
    return model


def _detect(cfg: ExperimentConfig, model: Model, scenes: Sequence[Scene], indices: Sequence[int]):
    spec = cfg.malfunction_spec()
    return [model.detect(scene_inputs(cfg, scenes, k, spec)) for k in indices]


def run_experiment(cfg: ExperimentConfig, data_dir, model: Optional[Model] = None,
                   scenes: Optional[list[Scene]] = None, workers: int = 1) -> MetricsReport:
    """Corrupt (per config), detect and score every scene of ``data_dir``.

    Scene-parallel execution splits scenes into contiguous chunks; results are
    gathered in scene order, so reports are identical for any ``workers``.
    """
    if scenes is None:
        _, scenes = load_scenes(cfg, data_dir)
    model = model or Model.init(cfg)
    idx = list(range(len(scenes)))
    if workers > 1 and len(idx) > 1:
        chunks = [c.tolist() for c in np.array_split(idx, min(workers, len(idx)))]
        flat = model.flat()
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_detect_range, [(cfg, str(data_dir), flat, c) for c in chunks]))
        dets = [d for part in parts for d in part]
    else:
        dets = _detect(cfg, model, scenes, idx)
    frames = [Frame(d, s.boxes) for d, s in zip(dets, scenes)]
    e = cfg.eval
    return evaluate(frames, cfg.channels.num_classes, tuple(e.thresholds), tuple(e.distance_buckets),
                    seed=cfg.malfunction_spec().seed, config_hash=cfg.config_hash())


def append_csv_row(path, cfg: ExperimentConfig, report: MetricsReport, label: str = "") -> None:
    """One row per run for sweep tables; writes a header for new files."""
    path = Path(path)
    cols = ["label", "streams", "lidar_mode", "afs_enabled", "config_hash", "mAP", "nds", "ate", "ase", "aoe",
            *(f"map_{k}" for k in report.distance_bucket_map)]
    row = [label, cfg.streams, cfg.lidar_mode, str(cfg.fusion.afs_enabled), report.config_hash,
           *(f"{getattr(report, k):.6f}" for k in ("mAP", "nds", "ate", "ase", "aoe")),
           *(f"{v:.6f}" for v in report.distance_bucket_map.values())]
    new = not path.exists()
    with path.open("a") as fh:
        if new:
            fh.write(",".join(cols) + "\n")
        fh.write(",".join(row) + "\n")
