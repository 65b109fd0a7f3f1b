import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevfuse import camera_stream as cs
from bevfuse.geometry import BEVGridSpec, CameraModel, ego_to_cell, surround_rig, unproject_pixel
from bevfuse.tensor_ops import ConvParams, ShapeError, conv2d, relu

from .test_tensor_ops import naive_conv


def _identity(c):
    return ConvParams(np.eye(c).reshape(c, c, 1, 1), np.zeros(c))


def _dummy_convs(c):
    return [ConvParams.zeros(c, c, 3) for _ in range(4)]


def _params(rng, c=3, d=4, z=3, n_scales=1, hidden=(4, 4, 4), c_cam=2):
    return cs.CameraStreamParams.init(c, n_scales, d, z, hidden, c_cam, rng)


# ------------------------------------------------------------------ ADP

def test_adp_single_scale_identity():
    x = np.random.default_rng(0).standard_normal((4, 6, 3))
    p = cs.CameraStreamParams([_identity(3)], _identity(3), ConvParams.zeros(2, 3, 1), _dummy_convs(3))
    np.testing.assert_array_equal(cs.adp_fuse([x], p), x)


def test_adp_zero_final_conv():
    rng = np.random.default_rng(1)
    p = _params(rng, n_scales=2)
    p.adp_out = ConvParams.zeros(3, 6, 1)
    out = cs.adp_fuse([rng.standard_normal((4, 4, 3)), rng.standard_normal((2, 2, 3))], p)
    assert not out.any()


def test_adp_two_scales_all_ones_oracle():
    rng = np.random.default_rng(2)
    s0, s1 = rng.standard_normal((4, 4, 2)), rng.standard_normal((2, 2, 2))
    ones = lambda o, i: ConvParams(np.ones((o, i, 1, 1)), np.zeros(o))  # noqa: E731
    p = cs.CameraStreamParams([ones(2, 2), ones(2, 2)], ones(2, 4), ConvParams.zeros(1, 2, 1), _dummy_convs(2))
    # hand oracle: nearest upsample, per-scale channel sums, then sum of the four branch channels
    up = np.zeros((4, 4, 2))
    for i in range(4):
        for j in range(4):
            up[i, j] = s1[i // 2, j // 2]
    branch0 = s0.sum(axis=2)
    branch1 = up.sum(axis=2)
    expected = np.repeat((2 * branch0 + 2 * branch1)[:, :, None], 2, axis=2)
    np.testing.assert_allclose(cs.adp_fuse([s0, s1], p), expected, atol=1e-5)


def test_adp_rejects_channel_mismatch():
    rng = np.random.default_rng(3)
    p = _params(rng, n_scales=2)
    with pytest.raises(ShapeError):
        cs.adp_fuse([np.zeros((4, 4, 3)), np.zeros((2, 2, 2))], p)
    with pytest.raises(ShapeError):
        cs.adp_fuse([np.zeros((4, 4, 3)), np.zeros((3, 3, 3))], p)


def test_adaptive_avg_pool_to_coarser_grid():
    x = np.arange(16, dtype=float).reshape(4, 4, 1)
    out = cs.adaptive_avg_pool(x, (2, 2))
    np.testing.assert_array_equal(out[:, :, 0], [[2.5, 4.5], [10.5, 12.5]])


# ------------------------------------------------------------------ depth and lift

def _depth_params(w, b):
    d, c = w.shape[0], w.shape[1]
    return cs.CameraStreamParams([_identity(c)], _identity(c), ConvParams(w, b), _dummy_convs(c))


def test_predict_depth_zero_params_uniform():
    bins = cs.DepthBins(1, 5, 4)
    p = _depth_params(np.zeros((4, 3, 1, 1)), np.zeros(4))
    dd = cs.predict_depth(np.random.default_rng(0).standard_normal((2, 3, 3)), p, bins)
    np.testing.assert_allclose(dd.data, 0.25)


def test_predict_depth_bias_closed_form():
    bins = cs.DepthBins(1, 5, 2)
    p = _depth_params(np.zeros((2, 3, 1, 1)), np.array([0.0, math.log(3)]))
    dd = cs.predict_depth(np.ones((2, 2, 3)), p, bins).data
    np.testing.assert_allclose(dd[..., 0], 0.25, rtol=1e-12)
    np.testing.assert_allclose(dd[..., 1], 0.75, rtol=1e-12)


def test_depth_distribution_invariants_random_params():
    bins = cs.DepthBins(1, 40, 7)
    for s in range(100):
        rng = np.random.default_rng(s)
        p = _depth_params(rng.standard_normal((7, 3, 1, 1)) * 3, rng.standard_normal(7))
        cs.predict_depth(rng.standard_normal((3, 4, 3)).astype(np.float32), p, bins).check(1e-5)


def test_depth_bins_centers_and_validation():
    np.testing.assert_allclose(cs.DepthBins(1, 5, 4).centers, [1.5, 2.5, 3.5, 4.5])
    with pytest.raises(ValueError):
        cs.DepthBins(0, 5, 4)
    with pytest.raises(ValueError):
        cs.DepthBins(5, 1, 4)


def test_lift_examples():
    np.testing.assert_array_equal(cs.lift(np.full((1, 1, 1), 2.0), np.array([[[0.25, 0.75]]]))[0, 0, :, 0],
                                  [0.5, 1.5])
    f = np.random.default_rng(0).standard_normal((2, 3, 4))
    np.testing.assert_array_equal(cs.lift(f, np.ones((2, 3, 1)))[:, :, 0, :], f)
    assert not cs.lift(np.zeros((2, 2, 3)), np.full((2, 2, 4), 0.25)).any()
    with pytest.raises(ShapeError):
        cs.lift(np.zeros((2, 2, 3)), np.zeros((3, 2, 4)))


# ------------------------------------------------------------------ splat

GRID = BEVGridSpec(-10, 10, -10, 10, -2, 4, 1.0, 3)


def naive_splat(frustums, cams, grid, bins):
    """Per ray: scalar unprojection, scalar cell lookup, sequential float32 sums."""
    c = frustums[0].shape[-1]
    v = np.zeros((*grid.shape, c), dtype=np.float32)
    for cam, fr in zip(cams, frustums):
        for row in range(cam.height):
            for col in range(cam.width):
                for k, d in enumerate(bins.centers):
                    p = unproject_pixel(cam, col + 0.5, row + 0.5, float(d))
                    cell = ego_to_cell(grid, p)
                    if cell is not None:
                        v[cell] += fr[row, col, k]
    return v


def test_splat_matches_per_ray_loop():
    cams = surround_rig([0.0, 2.0, -2.5], 8, 4, math.radians(70), 1.2)
    bins = cs.DepthBins(1, 15, 5)
    rng = np.random.default_rng(7)
    fr = [rng.standard_normal((4, 8, 5, 2)).astype(np.float32) for _ in cams]
    plan = cs.SplatPlan.build(cams, GRID, bins)
    np.testing.assert_array_equal(cs.splat(fr, plan), naive_splat(fr, cams, GRID, bins))


def _single_pixel_cam(yaw=0.0, mount=1.0):
    from bevfuse.geometry import yaw_camera_pose

    return CameraModel(1.0, 1.0, 0.5, 0.5, 1, 1, yaw_camera_pose(yaw, (0, 0, mount)))


def test_splat_single_ray_trace():
    cam = _single_pixel_cam()
    bins = cs.DepthBins(2.0, 4.0, 1)  # one bin at 3 m straight ahead
    f = np.array([1.0, -2.0], dtype=np.float32)
    v = cs.splat([f.reshape(1, 1, 1, 2)], cs.SplatPlan.build([cam], GRID, bins))
    cell = ego_to_cell(GRID, (3.0, 0.0, 1.0))
    nz = {tuple(i) for i in np.argwhere(v.any(axis=3))}
    assert nz == {cell}
    np.testing.assert_array_equal(v[cell], f)


def test_splat_two_rays_same_cell_add():
    # at 3.5 m these yaws land at y = 0.35 and 0.52, both in the cell x in [3, 4), y in [0, 1)
    cams = [_single_pixel_cam(yaw=0.1), _single_pixel_cam(yaw=0.15)]
    bins = cs.DepthBins(3.0, 4.0, 1)
    f1, f2 = np.array([[[[1.0]]]], np.float32), np.array([[[[2.5]]]], np.float32)
    v = cs.splat([f1, f2], cs.SplatPlan.build(cams, GRID, bins))
    assert v.sum() == 3.5
    assert v[ego_to_cell(GRID, (3.5, 0.5, 1.0))][0] == 3.5


def test_splat_all_rays_out_of_grid():
    cam = _single_pixel_cam(mount=10.0)  # above z_max
    bins = cs.DepthBins(1, 5, 3)
    fr = [np.ones((1, 1, 3, 2), np.float32)]
    plan = cs.SplatPlan.build([cam], GRID, bins)
    assert not cs.splat(fr, plan).any()
    np.testing.assert_array_equal(cs.in_grid_mass(fr, plan), [0.0, 0.0])


def test_splat_additive_in_cameras():
    cams = surround_rig([0.0, 1.0, 2.0, 3.0], 6, 4, math.radians(70), 1.0)
    bins = cs.DepthBins(1, 12, 4)
    rng = np.random.default_rng(9)
    fr = [rng.standard_normal((4, 6, 4, 3)).astype(np.float32) for _ in cams]
    a = cs.splat(fr[:2], cs.SplatPlan.build(cams[:2], GRID, bins)).astype(np.float64)
    b = cs.splat(fr[2:], cs.SplatPlan.build(cams[2:], GRID, bins)).astype(np.float64)
    ab = cs.splat(fr, cs.SplatPlan.build(cams, GRID, bins)).astype(np.float64)
    np.testing.assert_allclose(a + b, ab, atol=1e-5)


def test_splat_mass_equals_lift_sum_when_all_in_grid():
    cams = surround_rig([0.0, math.pi], 6, 2, math.radians(40), 1.0)
    bins = cs.DepthBins(1, 6, 3)
    plan = cs.SplatPlan.build(cams, GRID, bins)
    assert plan.in_grid.all()
    rng = np.random.default_rng(4)
    fr = [rng.random((2, 6, 3, 2)) for _ in cams]
    total = sum(f.sum(axis=(0, 1, 2)) for f in fr)
    np.testing.assert_allclose(cs.splat(fr, plan).sum(axis=(0, 1, 2)), total, rtol=1e-4)


def test_splat_shape_mismatch():
    cams = surround_rig([0.0], 6, 2, math.radians(40), 1.0)
    plan = cs.SplatPlan.build(cams, GRID, cs.DepthBins(1, 6, 3))
    with pytest.raises(ShapeError):
        cs.splat([np.zeros((2, 6, 4, 1))], plan)
    with pytest.raises(ShapeError):
        cs.splat([], plan)


# ------------------------------------------------------------------ s2c and encoder

def test_s2c_enumeration_and_inverse():
    v = np.arange(6.0).reshape(1, 1, 2, 3)
    np.testing.assert_array_equal(cs.s2c(v)[0, 0], [0, 1, 2, 3, 4, 5])
    w = np.random.default_rng(0).standard_normal((3, 4, 1, 5))
    np.testing.assert_array_equal(cs.s2c(w), w[:, :, 0, :])
    u = np.random.default_rng(1).standard_normal((3, 4, 2, 5))
    np.testing.assert_array_equal(cs.c2s(cs.s2c(u), 2), u)


def test_bev_encode_zero_weights():
    convs = [ConvParams.zeros(o, i, 3) for i, o in [(4, 3), (3, 3), (3, 3), (3, 2)]]
    assert not cs.bev_encode(np.ones((5, 5, 4)), convs).any()


def test_bev_encode_matches_naive_conv_chain():
    rng = np.random.default_rng(11)
    chain = [4, 3, 3, 3, 2]
    convs = [ConvParams(rng.standard_normal((o, i, 3, 3)), rng.standard_normal(o))
             for i, o in zip(chain[:-1], chain[1:])]
    x = rng.standard_normal((4, 4, 4))
    ref = x
    for n, c in enumerate(convs):
        ref = naive_conv(ref, c.weight, c.bias)
        if n < 3:
            ref = np.maximum(ref, 0)
    out = cs.bev_encode(x, convs)
    assert out.shape == (4, 4, 2)
    np.testing.assert_allclose(out, ref, atol=1e-4)


def test_params_reject_broken_chain():
    rng = np.random.default_rng(0)
    p = _params(rng)
    with pytest.raises(ShapeError):
        cs.CameraStreamParams(p.adp_scales, p.adp_out, p.depth_head, p.bev_convs[:3])
    with pytest.raises(ShapeError):
        cs.CameraStreamParams(p.adp_scales, p.adp_out, p.depth_head,
                              [p.bev_convs[0], p.bev_convs[0], p.bev_convs[2], p.bev_convs[3]])


# ------------------------------------------------------------------ composed stream

def test_camera_bev_zero_features_zero_output():
    rng = np.random.default_rng(0)
    cams = surround_rig([0.0, math.pi], 6, 4, math.radians(60), 1.0)
    p = _params(rng)
    for c in [*p.adp_scales, p.adp_out, *p.bev_convs]:
        c.bias[:] = 0
    bins = cs.DepthBins(1, 9, 4)
    out = cs.camera_bev([np.zeros((4, 6, 3))] * 2, cams, GRID, p, bins)
    assert out.shape == (GRID.nx, GRID.ny, 2)
    assert not out.any()


def test_camera_bev_single_ray_receptive_field():
    rng = np.random.default_rng(1)
    cam = _single_pixel_cam()
    bins = cs.DepthBins(2.0, 4.0, 1)
    p = _params(rng, d=1, z=GRID.nz)
    for c in p.bev_convs:
        c.bias[:] = 0
    out = cs.camera_bev([np.ones((1, 1, 3))], [cam], GRID, p, bins)
    ix, iy, _ = ego_to_cell(GRID, (3.0, 0.0, 1.0))
    nz = np.argwhere(np.abs(out).sum(axis=2) > 0)
    assert len(nz)
    # four stacked 3x3 convs reach at most 4 cells away
    assert np.abs(nz - [ix, iy]).max() <= 4


@settings(max_examples=10, deadline=None)
@given(n_cams=st.integers(1, 4), seed=st.integers(0, 1000))
def test_camera_bev_shape_for_any_camera_count(n_cams, seed):
    rng = np.random.default_rng(seed)
    cams = surround_rig([k * 2 * math.pi / n_cams for k in range(n_cams)], 4, 2, math.radians(60), 1.0)
    p = _params(rng)
    feats = [rng.standard_normal((2, 4, 3)) for _ in cams]
    assert cs.camera_bev(feats, cams, GRID, p, cs.DepthBins(1, 9, 4)).shape == (GRID.nx, GRID.ny, 2)


def test_feature_map_file_roundtrip(tmp_path):
    x = np.random.default_rng(0).standard_normal((3, 5, 2)).astype(np.float32)
    cs.write_feature_map(tmp_path / "a.feat", x)
    assert (tmp_path / "a.feat").read_bytes().startswith(b"FEAT 3 5 2\n")
    np.testing.assert_array_equal(cs.read_feature_map(tmp_path / "a.feat"), x)
