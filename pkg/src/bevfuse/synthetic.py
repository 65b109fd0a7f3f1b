"""Seeded synthetic scenes: boxes, LiDAR returns and camera feature stubs.

Camera "images" are feature stubs rendered by ray casting: each pixel that
hits a box carries that class's embedding, ground pixels carry a ground
embedding, sky pixels are zero. A block of depth-cue channels (Gaussian
bumps over depth) plays the role of the monocular depth evidence a real
backbone extracts; set ``depth_cue_channels = 0`` to drop it.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import shapely

from .augmentation import Box3D
from .camera_stream import read_feature_map, write_feature_map
from .geometry import CameraModel, surround_rig
from .lidar_stream import PointCloud, read_points, write_points
from .rng import stream

DEFAULT_YAWS = (0.0, math.pi / 3, 2 * math.pi / 3, math.pi, -2 * math.pi / 3, -math.pi / 3)
# surface points sit this far (meters) inside each face so they stay inside
# the box after the float32 round trip through points.bin (~4e-6 m at 50 m)
FACE_INSET = 1e-4
MAX_REJECTIONS = 1000
# eval splits draw scenes from here on, disjoint from any train split
EVAL_FIRST_INDEX = 100_000


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    n_objects: tuple[int, int] = (4, 10)
    num_classes: int = 2
    # per class: ((dx lo, hi), (dy lo, hi), (dz lo, hi))
    size_ranges: tuple = (((3.8, 4.8), (1.7, 2.1), (1.4, 1.8)),
                          ((0.6, 1.0), (0.6, 1.0), (1.6, 1.9)))
    class_intensity: tuple = (0.7, 0.35)
    region: tuple[float, float, float, float] = (-22.0, 22.0, -22.0, 22.0)
    min_range: float = 4.0
    points_per_object: tuple[int, int] = (30, 80)
    ground_points: int = 3000
    ground: bool = True
    ground_extent: tuple[float, float, float, float] = (-24.0, 24.0, -24.0, 24.0)
    rig_yaws: tuple = DEFAULT_YAWS
    image_width: int = 48
    image_height: int = 12
    hfov: float = math.radians(64.0)
    mount_height: float = 1.5
    c_image: int = 16
    depth_cue_channels: int = 8
    depth_cue_range: tuple[float, float] = (1.0, 40.0)
    feature_noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.n_objects
        if not 0 <= lo <= hi:
            raise ValueError(f"bad n_objects range {self.n_objects}")
        if len(self.size_ranges) != self.num_classes or len(self.class_intensity) != self.num_classes:
            raise ValueError("size_ranges and class_intensity need one entry per class")
        for rng_ in self.size_ranges:
            for a, b in rng_:
                if not 0 < a <= b:
                    raise ValueError(f"bad size range {rng_}")
        if not 0 <= self.depth_cue_channels < self.c_image:
            raise ValueError("depth_cue_channels must leave at least one semantic channel")
        if self.points_per_object[0] > self.points_per_object[1]:
            raise ValueError("bad points_per_object range")

    def cameras(self) -> list[CameraModel]:
        return surround_rig(self.rig_yaws, self.image_width, self.image_height, self.hfov, self.mount_height)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        def tup(x):
            return tuple(tup(v) for v in x) if isinstance(x, list) else x
        return cls(**{k: tup(v) for k, v in d.items()})


@dataclass
class Scene:
    boxes: list[Box3D]
    cloud: PointCloud
    camera_features: list[np.ndarray]  # (H, W, c_image) float32 per camera
    camera_depth: list[np.ndarray]  # (H, W) float64, 0 where no surface
    point_box: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))  # -1 = ground
    pixel_box: list[np.ndarray] = field(default_factory=list)  # per camera (H, W): box index, -1 ground, -2 sky


# ------------------------------------------------------------------ placement

def _footprint(b: Box3D):
    return shapely.Polygon(b.footprint())


def sample_boxes(spec: SceneSpec, rng: np.random.Generator) -> list[Box3D]:
    n = int(rng.integers(spec.n_objects[0], spec.n_objects[1] + 1))
    x0, x1, y0, y1 = spec.region
    region = shapely.box(x0, y0, x1, y1)
    boxes: list[Box3D] = []
    polys = []
    rejections = 0
    while len(boxes) < n:
        cls = int(rng.integers(spec.num_classes))
        size = tuple(float(rng.uniform(a, b)) for a, b in spec.size_ranges[cls])
        cx, cy = float(rng.uniform(x0, x1)), float(rng.uniform(y0, y1))
        yaw = float(np.pi - rng.uniform(0.0, 2 * np.pi))  # (-pi, pi]
        b = Box3D((cx, cy, size[2] / 2), size, yaw, cls)
        poly = _footprint(b)
        ok = (math.hypot(cx, cy) - 0.5 * math.hypot(size[0], size[1]) >= spec.min_range
              and region.contains(poly)
              and not any(poly.intersects(q) for q in polys))
        if ok:
            boxes.append(b)
            polys.append(poly)
            continue
        rejections += 1
        if rejections >= MAX_REJECTIONS:
            raise GenerationError(f"could not place {n} objects after {MAX_REJECTIONS} rejections")
    return boxes


# ------------------------------------------------------------------ LiDAR

def _box_frame(b: Box3D) -> tuple[np.ndarray, np.ndarray]:
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])  # local -> ego
    return rot, np.asarray(b.center)


def visible_faces(b: Box3D, origin=(0.0, 0.0, 0.0)) -> list[tuple[int, int]]:
    """(axis, sign) of faces whose outward normal points toward ``origin``."""
    rot, ctr = _box_frame(b)
    out = []
    for axis in range(3):
        for sign in (1, -1):
            n = rot[:, axis] * sign
            fc = ctr + n * b.size[axis] / 2
            if float(n @ (np.asarray(origin) - fc)) > 0:
                out.append((axis, sign))
    return out


def sample_box_surface(b: Box3D, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points uniform over the faces of ``b`` visible from the origin, (n, 3)."""
    faces = visible_faces(b)
    if not faces or n == 0:
        return np.zeros((0, 3))
    half = np.asarray(b.size) / 2 - FACE_INSET
    areas = np.array([np.prod([b.size[a] for a in range(3) if a != ax]) for ax, _ in faces])
    counts = rng.multinomial(n, areas / areas.sum())
    rot, ctr = _box_frame(b)
    chunks = []
    for (axis, sign), k in zip(faces, counts):
        local = rng.uniform(-1.0, 1.0, size=(k, 3)) * half
        local[:, axis] = sign * half[axis]
        chunks.append(local @ rot.T + ctr)
    return np.concatenate(chunks)


def sample_lidar(spec: SceneSpec, boxes: Sequence[Box3D], rng: np.random.Generator) -> tuple[PointCloud, np.ndarray]:
    pts, owner = [], []
    for i, b in enumerate(boxes):
        n = int(rng.integers(spec.points_per_object[0], spec.points_per_object[1] + 1))
        xyz = sample_box_surface(b, n, rng)
        inten = np.clip(spec.class_intensity[b.class_id] + rng.normal(0, 0.05, len(xyz)), 0, 1)
        pts.append(np.column_stack([xyz, inten]))
        owner.append(np.full(len(xyz), i))
    if spec.ground and spec.ground_points:
        x0, x1, y0, y1 = spec.ground_extent
        g = np.column_stack([
            rng.uniform(x0, x1, spec.ground_points), rng.uniform(y0, y1, spec.ground_points),
            np.zeros(spec.ground_points), np.clip(rng.normal(0.1, 0.03, spec.ground_points), 0, 1)])
        # no occlusion model: ground returns are kept under objects. Boxes rest
        # on z=0 and box membership is inclusive, so object dropout removes
        # these too and leaves a footprint-shaped hole
        pts.append(g)
        owner.append(np.full(len(g), -1))
    if not pts:
        return PointCloud.empty(), np.zeros(0, dtype=np.int64)
    return PointCloud(np.concatenate(pts)), np.concatenate(owner).astype(np.int64)


# ------------------------------------------------------------------ cameras

def ray_box_depth(origin: np.ndarray, dirs: np.ndarray, b: Box3D) -> np.ndarray:
    """Ray parameter of the first entry into ``b`` (inf on miss); dirs (..., 3)."""
    rot, ctr = _box_frame(b)
    o = rot.T @ (origin - ctr)
    d = dirs @ rot  # rows rotated into the box frame
    half = np.asarray(b.size) / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    tmin = np.where(d == 0, np.where(np.abs(o) <= half, -np.inf, np.inf), np.minimum(t1, t2))
    tmax = np.where(d == 0, np.where(np.abs(o) <= half, np.inf, -np.inf), np.maximum(t1, t2))
    near = tmin.max(axis=-1)
    far = tmax.min(axis=-1)
    hit = (near <= far) & (near > 0)
    return np.where(hit, near, np.inf)


def class_embeddings(spec: SceneSpec) -> np.ndarray:
    """(num_classes + 1, n_semantic) unit vectors; the last row is the ground."""
    n_sem = spec.c_image - spec.depth_cue_channels
    e = stream(spec.seed, "embedding").normal(size=(spec.num_classes + 1, n_sem))
    return e / np.linalg.norm(e, axis=1, keepdims=True)


def depth_cue(depth: np.ndarray, spec: SceneSpec) -> np.ndarray:
    k = spec.depth_cue_channels
    if k == 0:
        return np.zeros(depth.shape + (0,))
    lo, hi = spec.depth_cue_range
    centers = np.linspace(lo, hi, k)
    width = (hi - lo) / max(k - 1, 1)
    return np.exp(-0.5 * ((depth[..., None] - centers) / width) ** 2)


def render_camera_features(scene_boxes: Sequence[Box3D], cam: CameraModel, spec: SceneSpec,
                           rng: np.random.Generator | None = None):
    """Returns ``(features (H, W, c_image) float32, depth (H, W), pixel_box (H, W))``."""
    rays_cam = cam.pixel_rays()
    dirs = rays_cam @ cam.rotation.T  # ego frame, camera-z component of each ray is 1
    origin = cam.translation
    best = np.full(dirs.shape[:2], np.inf)
    owner = np.full(dirs.shape[:2], -2, dtype=np.int64)
    for i, b in enumerate(scene_boxes):
        t = ray_box_depth(origin, dirs, b)
        closer = t < best
        best[closer] = t[closer]
        owner[closer] = i
    if spec.ground:
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(dirs[..., 2] < 0, -origin[2] / dirs[..., 2], np.inf)
        hit = origin[None, None, :2] + t[..., None] * dirs[..., :2]
        x0, x1, y0, y1 = spec.ground_extent
        inside = (hit[..., 0] >= x0) & (hit[..., 0] <= x1) & (hit[..., 1] >= y0) & (hit[..., 1] <= y1)
        t = np.where(inside & np.isfinite(t), t, np.inf)
        closer = t < best
        best[closer] = t[closer]
        owner[closer] = -1
    defined = np.isfinite(best)
    depth = np.where(defined, best, 0.0)

    emb = class_embeddings(spec)
    n_sem = emb.shape[1]
    feats = np.zeros(dirs.shape[:2] + (spec.c_image,))
    for i, b in enumerate(scene_boxes):
        feats[owner == i, :n_sem] = emb[b.class_id]
    feats[owner == -1, :n_sem] = emb[-1]
    feats[..., n_sem:] = depth_cue(depth, spec)
    if rng is not None and spec.feature_noise > 0:
        feats += rng.normal(0.0, spec.feature_noise, feats.shape)
    feats[~defined] = 0.0
    return feats.astype(np.float32), depth, owner


def generate_scene(spec: SceneSpec, scene_index: int) -> Scene:
    rng = stream(spec.seed, "scene", scene_index)
    boxes = sample_boxes(spec, rng)
    cloud, point_box = sample_lidar(spec, boxes, rng)
    feats, depths, owners = [], [], []
    for i, cam in enumerate(spec.cameras()):
        f, d, o = render_camera_features(boxes, cam, spec, stream(spec.seed, "camera", scene_index, i))
        feats.append(f)
        depths.append(d)
        owners.append(o)
    return Scene(boxes, cloud, feats, depths, point_box, owners)


# ------------------------------------------------------------------ dataset directory

BOX_HEADER = "# cx\tcy\tcz\tdx\tdy\tdz\tyaw\tclass_id"


def write_boxes(path, boxes: Sequence[Box3D]) -> None:
    lines = [BOX_HEADER]
    for b in boxes:
        lines.append("\t".join([*(repr(float(v)) for v in (*b.center, *b.size, b.yaw)), str(b.class_id)]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_boxes(path) -> list[Box3D]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        v = line.split("\t")
        out.append(Box3D((float(v[0]), float(v[1]), float(v[2])),
                         (float(v[3]), float(v[4]), float(v[5])), float(v[6]), int(v[7])))
    return out


def scene_dir(root, index: int) -> Path:
    return Path(root) / f"scene_{index:04d}"


def write_scene(root, index: int, scene: Scene) -> None:
    d = scene_dir(root, index)
    d.mkdir(parents=True, exist_ok=True)
    write_points(d / "points.bin", scene.cloud)
    write_boxes(d / "boxes.tsv", scene.boxes)
    for i, (f, dep) in enumerate(zip(scene.camera_features, scene.camera_depth)):
        write_feature_map(d / f"cam{i}.feat", f)
        write_feature_map(d / f"cam{i}.depth", dep.astype(np.float32))


def read_scene(root, index: int, num_cameras: int) -> Scene:
    d = scene_dir(root, index)
    feats = [read_feature_map(d / f"cam{i}.feat") for i in range(num_cameras)]
    depths = [read_feature_map(d / f"cam{i}.depth")[:, :, 0].astype(np.float64) for i in range(num_cameras)]
    return Scene(read_boxes(d / "boxes.tsv"), read_points(d / "points.bin"), feats, depths)


@dataclass
class Manifest:
    spec: SceneSpec
    num_scenes: int
    seed: int
    cameras: list[CameraModel]
    first_index: int = 0

    def to_json(self) -> str:
        return json.dumps({
            "format": 1,
            "spec": self.spec.to_dict(),
            "num_scenes": self.num_scenes,
            "seed": self.seed,
            "cameras": [c.to_dict() for c in self.cameras],
            "first_index": self.first_index,
        }, indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, root) -> "Manifest":
        path = Path(root) / "manifest.json"
        if not path.exists():
            raise FileNotFoundError(f"{root}: no manifest.json (not a dataset directory)")
        d = json.loads(path.read_text())
        return cls(SceneSpec.from_dict(d["spec"]), int(d["num_scenes"]), int(d["seed"]),
                   [CameraModel.from_dict(c) for c in d["cameras"]], int(d.get("first_index", 0)))


def write_dataset(root, spec: SceneSpec, num_scenes: int, first_index: int = 0) -> Manifest:
    """Scenes ``first_index .. first_index + num_scenes - 1`` stored as scene_0000, ..."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for k in range(num_scenes):
        write_scene(root, k, generate_scene(spec, first_index + k))
    m = Manifest(spec, num_scenes, spec.seed, spec.cameras(), first_index)
    (root / "manifest.json").write_text(m.to_json())
    return m
