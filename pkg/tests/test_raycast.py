import numpy as np
import pytest

from hashfusion.core import Intrinsics, Pose
from hashfusion.io.synth import default_intrinsics, look_at
from hashfusion.raycast import (RayState, RenderState, cast_ray, forward_project, march, ranges_from_corners,
                                render_expected_ranges, render_maps)
from hashfusion.voxelmap import block_corners

from helpers import plane_slab_map


def box(lo, hi):
    return np.array([[x, y, z] for z in (lo[2], hi[2]) for y in (lo[1], hi[1]) for x in (lo[0], hi[0])], float)


@pytest.fixture(scope="module")
def slab():
    return plane_slab_map(z_plane=1.0)


def test_ranges_cover_projected_box():
    intr = Intrinsics(64, 48, 40.0, 40.0, 31.5, 23.5)
    rng = ranges_from_corners(box((-0.1, -0.05, 1.0), (0.1, 0.05, 1.2))[None], Pose(), intr)
    u, v, _ = intr.project(box((-0.1, -0.05, 1.0), (0.1, 0.05, 1.2)))
    x0, x1 = int(np.floor(u.min())), int(np.ceil(u.max()))
    y0, y1 = int(np.floor(v.min())), int(np.ceil(v.max()))
    inside = np.zeros(intr.shape, bool)
    inside[y0:y1 + 1, x0:x1 + 1] = True
    assert np.array_equal(np.isfinite(rng[..., 0]), inside)
    assert np.allclose(rng[inside], [1.0, 1.2])


def test_ranges_merge_overlapping_boxes():
    intr = Intrinsics(64, 48, 40.0, 40.0, 31.5, 23.5)
    boxes = np.stack([box((-0.1, -0.1, 1.0), (0.1, 0.1, 1.2)), box((-0.1, -0.1, 1.5), (0.1, 0.1, 1.6))])
    rng = ranges_from_corners(boxes, Pose(), intr)
    assert np.allclose(rng[23, 31], [1.0, 1.6])


def test_ranges_ignore_boxes_behind_or_beyond():
    intr = Intrinsics(64, 48, 40.0, 40.0, 31.5, 23.5)
    boxes = np.stack([box((-1, -1, -2), (1, 1, -1)), box((-1, -1, 5), (1, 1, 6))])
    assert np.isnan(ranges_from_corners(boxes, Pose(), intr)).all()
    assert np.isnan(ranges_from_corners(np.zeros((0, 8, 3)), Pose(), intr)).all()


def test_box_straddling_near_plane_covers_whole_width():
    intr = Intrinsics(64, 48, 40.0, 40.0, 31.5, 23.5)
    rng = ranges_from_corners(box((-0.01, -0.01, 0.1), (0.01, 0.01, 0.5))[None], Pose(), intr, zmin=0.2)
    assert np.isfinite(rng[..., 0]).all()
    assert np.allclose(rng[..., 0], 0.2) and np.allclose(rng[..., 1], 0.5)


def test_expected_ranges_bracket_the_plane(slab):
    intr = default_intrinsics(40, 30)
    rng = render_expected_ranges(slab, Pose(), intr, slab.allocated_entries())
    seen = np.isfinite(rng[..., 0])
    assert seen.any()
    assert np.all(rng[seen, 0] <= 1.0) and np.all(rng[seen, 1] >= 1.0)


def test_render_plane_depth_and_normals(slab):
    intr = default_intrinsics(40, 30)
    rng = render_expected_ranges(slab, Pose(), intr, slab.allocated_entries())
    st = render_maps(slab, Pose(), intr, mu=0.04, expected_range=rng)
    rays = intr.rays()
    inner = (np.abs(rays[..., 0]) < 0.28) & (np.abs(rays[..., 1]) < 0.28)
    assert st.hit[inner].all()
    assert np.allclose(st.depth[inner], 1.0, atol=1e-3)
    assert np.allclose(st.normals[inner], [0, 0, -1], atol=1e-3)
    assert np.all(st.depth[~st.hit] == -1)


def test_cast_ray_hits_plane(slab):
    p, hit = cast_ray(slab, [0.05, -0.02, 0.0], [0, 0, 1], (0.5, 1.5), mu=0.04)
    assert hit
    assert p * slab.voxel_size == pytest.approx([0.05, -0.02, 1.0], abs=1e-3)


def test_ray_starting_behind_surface_is_wrong_side(slab):
    origin = np.array([[0.0, 0.0, 105.0]])   # voxel units, just behind the plane
    t, hit, state = march(slab, origin, [[0, 0, 1]], 0.0, 10.0, mu=0.04)
    assert not hit[0] and state[0] == RayState.WRONG_SIDE


def test_ray_through_empty_space_misses(slab):
    t, hit, state = march(slab, [[100.0, 100.0, 0.0]], [[0, 0, 1]], 20.0, 300.0, mu=0.04)
    assert not hit[0] and np.isnan(t[0]) and state[0] == -1


def test_empty_or_inverted_range_misses(slab):
    _, hit, _ = march(slab, [[0.0, 0.0, 0.0]], [[0, 0, 1]], [np.nan], [np.nan], mu=0.04)
    assert not hit[0]
    _, hit, _ = march(slab, [[0.0, 0.0, 0.0]], [[0, 0, 1]], 150.0, 50.0, mu=0.04)
    assert not hit[0]


def test_render_requires_range_and_known_mode(slab):
    intr = default_intrinsics(8, 6)
    with pytest.raises(ValueError, match="expected range"):
        render_maps(slab, Pose(), intr)
    with pytest.raises(ValueError, match="mode"):
        render_maps(slab, Pose(), intr, mode="depth", expected_range=np.zeros((6, 8, 2)))


def test_grey_render_of_facing_plane(slab):
    intr = default_intrinsics(20, 16)
    rng = render_expected_ranges(slab, Pose(), intr, slab.allocated_entries())
    st = render_maps(slab, Pose(), intr, mu=0.04, expected_range=rng, mode="grey")
    # a head-on surface is fully lit: 0.8 * 1 + 0.2
    assert st.colour[8, 10] == 255
    assert np.all(st.colour[~st.hit] == 0)


def test_forward_projection_same_pose_reproduces_points(slab):
    intr = default_intrinsics(20, 16)
    rng = render_expected_ranges(slab, Pose(), intr, slab.allocated_entries())
    st = render_maps(slab, Pose(), intr, mu=0.04, expected_range=rng)
    pts, missing = forward_project(st, Pose(), intr)
    hit = st.hit
    assert np.allclose(pts[hit], st.points[hit])
    assert set(missing) == set(np.flatnonzero(~hit.ravel()))


def test_forward_projection_without_history():
    intr = default_intrinsics(6, 4)
    pts, missing = forward_project(RenderState(intr), Pose(), intr)
    assert np.isnan(pts).all() and len(missing) == 24


def test_approximate_render_matches_full(slab):
    intr = default_intrinsics(20, 16)
    P0 = Pose()
    P1 = look_at((0.01, 0, 0), (0.01, 0, 1.0))
    rng0 = render_expected_ranges(slab, P0, intr, slab.allocated_entries())
    st = render_maps(slab, P0, intr, mu=0.04, expected_range=rng0)
    rng1 = render_expected_ranges(slab, P1, intr, slab.allocated_entries())
    approx = render_maps(slab, P1, intr, st, mu=0.04, expected_range=rng1, approximate=True)
    full = render_maps(slab, P1, intr, mu=0.04, expected_range=rng1)
    both = approx.hit & full.hit
    assert both.sum() > 0.9 * full.hit.sum()
    # reused points are real surface points, so they lie on the plane
    assert np.allclose(approx.points[both][:, 2], 1.0, atol=1e-3)
    assert np.abs(approx.depth[both] - full.depth[both]).max() < 0.01


def test_block_corners_span_one_block(slab):
    c = block_corners(slab, slab.allocated_entries()[:1])[0]
    assert np.allclose(c.max(axis=0) - c.min(axis=0), 8 * slab.voxel_size)
