import numpy as np
import pytest
from sklearn.base import clone

from hashfusion.core import Pose, RgbdCalib, build_view
from hashfusion.fusion import SceneParams, fuse
from hashfusion.io.synth import default_intrinsics, look_at, plane_scene, sphere_in_room, synth_render_depth
from hashfusion.raycast import RenderState, render_expected_ranges, render_maps
from hashfusion.tracking import (ColourTracker, ExtendedTracker, ICPTracker, Quality, QualityClassifier,
                                 TrackerIterationSummary, TrackerOptions, bilinear, depth_weight,
                                 evaluate_tracking_quality, huber_rho, huber_weight, track_color, track_depth,
                                 tracking_summary, tukey_rho, tukey_weight)
from hashfusion.voxelmap import VoxelBlockMap

TARGET = (0.3, 0.2, 1.6)


def build_model(scene, intr, eyes, gt, mode="icp_maps"):
    calib = RgbdCalib.simple(intr)
    params = SceneParams(voxel_size=0.01, mu=0.04)
    vm = VoxelBlockMap(0.01)
    for eye in eyes:
        P = look_at(eye, TARGET)
        raw, rgb = synth_render_depth(scene, P, intr, calib=calib, with_rgb=True)
        fuse(vm, build_view(raw, rgb, calib), P, params)
    rng = render_expected_ranges(vm, gt, intr, vm.allocated_entries())
    maps = render_maps(vm, gt, intr, mu=params.mu, expected_range=rng, mode=mode)
    raw, rgb = synth_render_depth(scene, gt, intr, calib=calib, with_rgb=True)
    return maps, build_view(raw, rgb, calib)


@pytest.fixture(scope="module")
def room():
    gt = look_at((0, 0, 0), TARGET)
    maps, view = build_model(sphere_in_room(), default_intrinsics(160, 120),
                             [(0, 0, 0), (0.1, 0, 0), (-0.1, 0.05, 0)], gt, mode="color")
    return gt, maps, view


def angle_and_shift(a, b):
    return np.rad2deg((a @ b.inverse()).rotation_angle()), np.linalg.norm(a.inverse().translation
                                                                         - b.inverse().translation)


def test_ground_truth_is_a_fixed_point(room):
    gt, maps, view = room
    est, summary = track_depth(view, maps, gt)
    deg, m = angle_and_shift(est, gt)
    # the fused model is quantised to 1 cm voxels, so the optimum sits slightly off the truth
    assert deg < 0.05 and m < 1e-3
    # the far walls lie beyond the fusion range, so only about half the pixels have a model point
    assert not summary.degenerate and summary.inlier_fraction > 0.7 * maps.hit.mean()


def test_small_offset_is_recovered(room):
    gt, maps, view = room
    est, _ = track_depth(view, maps, Pose.exp([0.01, -0.02, 0.01, 0.01, 0.0, -0.01]) @ gt)
    deg, m = angle_and_shift(est, gt)
    assert deg < 0.2 and m < 0.002


def test_plane_is_degenerate():
    intr = default_intrinsics(80, 60)
    gt = look_at((0, 0, 0), (0, 0, 1.2))
    maps, view = build_model(plane_scene(1.2), intr, [(0, 0, 0)], gt)
    init = Pose.exp([0, 0, 0, 0.01, 0.0, 0.0]) @ gt
    est, summary = track_depth(view, maps, init)
    assert summary.degenerate
    assert est == init
    assert evaluate_tracking_quality(summary) == Quality.FAILED


def test_no_model_points_is_degenerate(room):
    gt, maps, view = room
    empty = RenderState(maps.intrinsics, pose=gt, points=np.full_like(maps.points, np.nan),
                        normals=np.full_like(maps.normals, np.nan))
    est, summary = track_depth(view, empty, gt)
    assert summary.degenerate and summary.inlier_fraction == 0


def test_missing_maps_rejected(room):
    gt, _, view = room
    with pytest.raises(ValueError):
        track_depth(view, RenderState(view.calib.intrinsics_d), gt)


def test_summary_at_truth_beats_summary_off_truth(room):
    gt, maps, view = room
    at = tracking_summary(view, maps, gt)
    off = tracking_summary(view, maps, Pose.exp([0.05, 0, 0, 0.05, 0, 0]) @ gt)
    assert at.residual_mean < off.residual_mean
    assert at.inlier_fraction > off.inlier_fraction
    clf = QualityClassifier()
    assert clf.score(at) > clf.score(off)
    assert evaluate_tracking_quality(at) == Quality.GOOD


@pytest.mark.parametrize("summary, expected", [
    (TrackerIterationSummary(inlier_fraction=0.0, hessian_det=1e3, residual_mean=0.001), Quality.FAILED),
    (TrackerIterationSummary(inlier_fraction=0.9, hessian_det=1e3, residual_mean=0.001, degenerate=True),
     Quality.FAILED),
    (TrackerIterationSummary(inlier_fraction=0.9, hessian_det=1e-8, residual_mean=0.002), Quality.GOOD),
    (TrackerIterationSummary(inlier_fraction=0.9, hessian_det=1e-8, residual_mean=0.02), Quality.FAILED),
])
def test_quality_classes(summary, expected):
    assert evaluate_tracking_quality(summary) == expected


def test_quality_poor_band():
    clf = QualityClassifier(weights=(1.0, 0.0, 0.0), bias=-1.5)
    s = TrackerIterationSummary(inlier_fraction=1.0, hessian_det=1.0, residual_mean=0.0)
    assert evaluate_tracking_quality(s, clf) == Quality.POOR


def test_robust_norms():
    r = np.array([-0.5, -0.01, 0.0, 0.005, 0.01, 0.3])
    assert np.allclose(huber_rho(r, 0.01)[[2, 3]], [0.0, 0.5 * 0.005 ** 2])
    # continuous with matching slope at the threshold
    assert huber_rho(np.array([0.01 + 1e-9]), 0.01)[0] == pytest.approx(0.5e-4, abs=1e-10)
    assert np.allclose(huber_weight(r, 0.01), [0.02, 1, 1, 1, 1, 1 / 30])
    assert np.all(tukey_weight(np.array([0.25, 1.0]), 0.25) == 0)
    assert tukey_rho(np.array([5.0]), 0.25)[0] == pytest.approx(0.25 ** 2 / 6)


def test_depth_weight_halves_at_three_metres():
    assert depth_weight(0.0) == pytest.approx(1.0)
    assert depth_weight(3.0) == pytest.approx(0.5)


def test_bilinear_is_exact_on_a_ramp():
    v, u = np.mgrid[0:10, 0:12].astype(float)
    img = 2 * u + 3 * v
    x, y = np.array([1.25, 10.9, 11.0]), np.array([2.5, 0.1, 1.0])
    val, valid, gx, gy = bilinear(img, x, y, with_gradient=True)
    assert valid.tolist() == [True, True, False]
    assert np.allclose(val[:2], 2 * x[:2] + 3 * y[:2])
    assert np.allclose(gx[:2], 2) and np.allclose(gy[:2], 3)
    img[3, 2] = np.nan
    assert not bilinear(img, np.array([1.5]), np.array([2.5]))[1][0]


def test_options_validation():
    with pytest.raises(ValueError):
        TrackerOptions(levels=0)
    with pytest.raises(ValueError):
        TrackerOptions(levels=3, iterations=(5, 5))


def test_colour_tracker_recovers_offset(room):
    gt, maps, view = room
    init = Pose.exp([0.005, -0.005, 0.0, 0.005, 0.0, 0.0]) @ gt
    est, summary = track_color(view, maps, init, subsample=1)
    assert not summary.degenerate
    deg0, m0 = angle_and_shift(init, gt)
    deg, m = angle_and_shift(est, gt)
    assert deg < deg0 / 4 and m < m0 / 2


def test_colour_tracker_needs_colour(room):
    gt, maps, view = room
    grey = RenderState(maps.intrinsics, pose=gt, points=maps.points, normals=maps.normals)
    with pytest.raises(ValueError, match="colour"):
        track_color(view, grey, gt)


def test_estimators_wrap_solvers(room):
    gt, maps, view = room
    init = Pose.exp([0.01, 0, 0, 0, 0.01, 0]) @ gt
    for est in (ICPTracker(), ExtendedTracker()):
        pose = clone(est).fit(maps).predict(view, init)
        assert angle_and_shift(pose, gt)[0] < 0.2
    ct = ColourTracker(subsample=2).fit(maps)
    assert ct.predict(view, gt) is not None and hasattr(ct, "summary_")
    with pytest.raises(ValueError):
        ICPTracker().fit(RenderState(maps.intrinsics))
