import math

import numpy as np
import pytest

from bevfuse.augmentation import (
    Box3D,
    MalfunctionSpec,
    camera_malfunction,
    draw_dropped_boxes,
    drop_object_points,
    limit_fov,
    point_in_box,
    points_in_box,
    wrap_angle,
)
from bevfuse.lidar_stream import PointCloud
from bevfuse.rng import stream


def _cloud(rng, n=1000, r=20.0):
    xyz = rng.uniform([-r, -r, -1], [r, r, 3], size=(n, 3))
    return PointCloud(np.column_stack([xyz, rng.random(n)]))


def test_full_fov_is_identity():
    pc = _cloud(np.random.default_rng(0))
    assert limit_fov(pc, (-math.pi, math.pi)).points.tobytes() == pc.points.tobytes()


def test_fov_axis_cases():
    pc = PointCloud(np.array([[1.0, 0, 0, 0.5], [-1.0, 0, 0, 0.5]]))
    np.testing.assert_array_equal(limit_fov(pc, (-math.pi / 2, math.pi / 2)).xyz, [[1.0, 0, 0]])


def test_fov_bounds_inclusive():
    pc = PointCloud(np.array([[0.0, 1.0, 0, 0.5], [0.0, -1.0, 0, 0.5]]))
    assert len(limit_fov(pc, (-math.pi / 2, math.pi / 2))) == 2


def test_fov_matches_brute_force_and_is_idempotent():
    pc = _cloud(np.random.default_rng(1))
    rng = np.random.default_rng(2)
    for _ in range(10):
        lo, hi = np.sort(rng.uniform(-math.pi, math.pi, 2))
        keep = [p for p in pc.points if lo <= math.atan2(p[1], p[0]) <= hi]
        out = limit_fov(pc, (lo, hi))
        np.testing.assert_array_equal(out.points, np.array(keep).reshape(-1, 4))
        assert limit_fov(out, (lo, hi)).points.tobytes() == out.points.tobytes()


def test_point_in_box_examples():
    b = Box3D((0, 0, 0), (2, 2, 2), 0.0, 0)
    assert point_in_box((0.9, 0, 0), b)
    assert not point_in_box((1.1, 0, 0), b)
    assert point_in_box((1.0, 1.0, 1.0), b)
    rotated = Box3D((0, 0, 0), (2, 0.5, 2), math.pi / 2, 0)
    assert point_in_box((0, 0.9, 0), rotated)
    assert not point_in_box((0.9, 0, 0), rotated)


def test_points_in_box_matches_scalar():
    rng = np.random.default_rng(3)
    b = Box3D((1, -2, 0.5), (4, 2, 1.5), 0.7, 1)
    xyz = rng.uniform(-5, 5, size=(500, 3))
    np.testing.assert_array_equal(points_in_box(xyz, b), [point_in_box(p, b) for p in xyz])


def test_box_validation():
    with pytest.raises(ValueError):
        Box3D((0, 0, 0), (1, 0, 1), 0.0, 0)
    with pytest.raises(ValueError):
        Box3D((0, 0, 0), (1, 1, 1), -math.pi, 0)
    assert wrap_angle(-math.pi) == math.pi


BOXES = [Box3D((5, 0, 0.5), (4, 2, 1.5), 0.3, 0), Box3D((-6, 4, 0.5), (1, 1, 2), -1.0, 1)]


def test_dropout_frame_coin_zero_is_identity():
    pc = _cloud(np.random.default_rng(4))
    out = drop_object_points(pc, BOXES, (0.0, 1.0), np.random.default_rng(0))
    assert out.points.tobytes() == pc.points.tobytes()


def test_certain_dropout_keeps_exactly_points_in_no_box():
    rng = np.random.default_rng(5)
    pc = _cloud(rng, r=8.0)
    out = drop_object_points(pc, BOXES, MalfunctionSpec(object_dropout=(1.0, 1.0)), rng)
    keep = [p for p in pc.points if not any(point_in_box(p[:3], b) for b in BOXES)]
    assert len(keep) < len(pc)
    np.testing.assert_array_equal(out.points, np.array(keep))


def test_dropout_removes_only_box_points():
    pc = _cloud(np.random.default_rng(6), r=8.0)
    for s in range(20):
        out = drop_object_points(pc, BOXES, (0.5, 0.5), stream(s, "drop"))
        kept = {p.tobytes() for p in out.points}
        removed = [p for p in pc.points if p.tobytes() not in kept]
        assert all(any(point_in_box(p[:3], b) for b in BOXES) for p in removed)


def test_dropout_frequency_monte_carlo():
    hits = np.zeros(3)
    n = 10_000
    for t in range(n):
        hits += draw_dropped_boxes(3, (0.5, 0.5), stream(123, "trial", t))
    assert ((hits / n >= 0.23) & (hits / n <= 0.27)).all()


def test_camera_modes():
    rng = np.random.default_rng(7)
    feats = [rng.standard_normal((2, 3, 4)) for _ in range(3)]
    prev = [rng.standard_normal((2, 3, 4)) for _ in range(3)]
    out = camera_malfunction(feats, 1, "none")
    assert all(a is b for a, b in zip(out, feats))
    out = camera_malfunction(feats, 1, "missing_front")
    assert not out[1].any() and out[0] is feats[0] and out[2] is feats[2]
    out = camera_malfunction(feats, 1, "preserve_front")
    assert out[1] is feats[1] and not out[0].any() and not out[2].any()
    out = camera_malfunction(feats, 1, "stuck", 1.0, prev, np.random.default_rng(0))
    assert all(a is b for a, b in zip(out, prev))
    out = camera_malfunction(feats, 1, "stuck", 0.0, prev, np.random.default_rng(0))
    assert all(a is b for a, b in zip(out, feats))


def test_camera_mode_errors():
    feats = [np.zeros((1, 1, 1))] * 2
    with pytest.raises(ValueError):
        camera_malfunction(feats, 0, "stuck", 0.5, None, np.random.default_rng(0))
    with pytest.raises(ValueError):
        camera_malfunction(feats, 2, "missing_front")
    with pytest.raises(ValueError):
        camera_malfunction(feats, 0, "blurry")


def test_spec_validation():
    with pytest.raises(ValueError):
        MalfunctionSpec(fov=(1.0, 0.5))
    with pytest.raises(ValueError):
        MalfunctionSpec(object_dropout=(1.5, 0.5))
    with pytest.raises(ValueError):
        MalfunctionSpec(camera_mode="foggy")
    assert MalfunctionSpec().is_clean
    assert not MalfunctionSpec(fov=(-1.0, 1.0)).is_clean
