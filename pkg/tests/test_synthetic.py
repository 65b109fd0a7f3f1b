import dataclasses
import math

import numpy as np
import pytest

from bevfuse.augmentation import Box3D, points_in_box
from bevfuse.geometry import CameraModel, unproject_pixel, yaw_camera_pose
from bevfuse.synthetic import (
    GenerationError,
    Manifest,
    SceneSpec,
    generate_scene,
    ray_box_depth,
    read_scene,
    render_camera_features,
    sample_boxes,
    write_dataset,
)

SPEC = SceneSpec(image_width=16, image_height=6, ground_points=400, seed=3)


def _same(a, b):
    assert a.boxes == b.boxes
    assert a.cloud.points.tobytes() == b.cloud.points.tobytes()
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.camera_features, b.camera_features))


def test_generation_is_deterministic():
    _same(generate_scene(SPEC, 4), generate_scene(SPEC, 4))
    assert generate_scene(SPEC, 4).boxes != generate_scene(SPEC, 5).boxes


def test_object_points_lie_in_their_box():
    for k in range(5):
        sc = generate_scene(SPEC, k)
        for i, b in enumerate(sc.boxes):
            pts = sc.cloud.xyz[sc.point_box == i]
            assert len(pts) and points_in_box(pts, b).all()


def test_object_points_survive_the_file_roundtrip(tmp_path):
    # float32 storage must not push surface points outside their box
    write_dataset(tmp_path, SPEC, 3)
    for k in range(3):
        orig = generate_scene(SPEC, k)
        back = read_scene(tmp_path, k, len(SPEC.rig_yaws))
        assert back.boxes == orig.boxes
        for i, b in enumerate(back.boxes):
            assert points_in_box(back.cloud.xyz[orig.point_box == i], b).all()


def test_boxes_do_not_overlap_and_stay_in_region():
    import shapely

    boxes = sample_boxes(SPEC, np.random.default_rng(0))
    polys = [shapely.Polygon(b.footprint()) for b in boxes]
    for i in range(len(polys)):
        assert shapely.box(-22, -22, 22, 22).contains(polys[i])
        for j in range(i):
            assert not polys[i].intersects(polys[j])


def test_no_objects_gives_ground_only():
    sc = generate_scene(dataclasses.replace(SPEC, n_objects=(0, 0)), 0)
    assert sc.boxes == []
    assert len(sc.cloud) == SPEC.ground_points and (sc.cloud.xyz[:, 2] == 0).all()


def test_placement_infeasible_raises():
    crowded = dataclasses.replace(SPEC, n_objects=(500, 500), region=(-8.0, 8.0, -8.0, 8.0))
    with pytest.raises(GenerationError):
        generate_scene(crowded, 0)


def test_empty_scene_without_ground_renders_nothing():
    spec = dataclasses.replace(SPEC, n_objects=(0, 0), ground=False)
    feats, depth, owner = render_camera_features([], spec.cameras()[0], spec, np.random.default_rng(0))
    assert not feats.any() and not depth.any() and (owner == -2).all()


def test_center_pixel_depth_is_analytic():
    # forward camera at height 1 facing +x; a box whose near face is the plane x = 6
    cam = CameraModel(10.0, 10.0, 5.0, 3.0, 10, 6, yaw_camera_pose(0.0, (0.0, 0.0, 1.0)))
    box = Box3D((8.0, 0.0, 1.0), (4.0, 6.0, 3.0), 0.0, 0)
    spec = dataclasses.replace(SPEC, ground=False)
    _, depth, owner = render_camera_features([box], cam, spec)
    # pixel centers sit half a pixel off the optical axis; the ray param is the camera-z depth
    assert owner[3, 5] == 0
    assert depth[3, 5] == pytest.approx(6.0, abs=1e-6)
    assert ray_box_depth(np.zeros(3), np.array([[1.0, 0, 0]]), box)[0] == pytest.approx(6.0, abs=1e-12)
    assert np.isinf(ray_box_depth(np.zeros(3), np.array([[-1.0, 0, 0]]), box)[0])


def test_depth_unprojects_onto_surfaces():
    sc = generate_scene(SPEC, 1)
    for cam, depth, owner in zip(SPEC.cameras(), sc.camera_depth, sc.pixel_box):
        for r in range(cam.height):
            for c in range(cam.width):
                if owner[r, c] == -2:
                    continue
                p = np.array(unproject_pixel(cam, c + 0.5, r + 0.5, depth[r, c]))
                if owner[r, c] == -1:
                    assert abs(p[2]) < 1e-3
                else:
                    b = sc.boxes[owner[r, c]]
                    grown = Box3D(b.center, tuple(s + 2e-3 for s in b.size), b.yaw, b.class_id)
                    shrunk = Box3D(b.center, tuple(s - 2e-3 for s in b.size), b.yaw, b.class_id)
                    assert points_in_box(p[None], grown)[0] and not points_in_box(p[None], shrunk)[0]


def test_dataset_manifest_roundtrip(tmp_path):
    m = write_dataset(tmp_path, SPEC, 2, first_index=10)
    back = Manifest.load(tmp_path)
    assert back.spec == SPEC and back.num_scenes == 2 and back.first_index == 10
    assert back.to_json() == m.to_json()
    _same(read_scene(tmp_path, 1, 6), read_scene(tmp_path, 1, 6))
    with pytest.raises(FileNotFoundError):
        Manifest.load(tmp_path / "nope")


def test_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(n_objects=(3, 2))
    with pytest.raises(ValueError):
        SceneSpec(depth_cue_channels=16, c_image=16)
    assert math.isclose(SPEC.hfov, math.radians(64.0))
