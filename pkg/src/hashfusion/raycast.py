"""Rendering the TSDF: expected depth ranges, ray marching and surface maps.

Any object with ``voxel_size``, ``probe(points)`` and
``sample(points, with_colour=...)`` over voxel coordinates can be rendered
(a :class:`~hashfusion.voxelmap.VoxelBlockMap`, its ``BlockIndex`` snapshot,
or a blend of several maps).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .core import Intrinsics, Pose
from .voxelmap import VoxelBlockMap, block_corners

FRAGMENT = 16


class RayState(enum.IntEnum):
    SEARCH_BLOCK_COARSE = 0
    SEARCH_BLOCK_FINE = 1
    SEARCH_SURFACE = 2
    BEHIND_SURFACE = 3
    WRONG_SIDE = 4


_DONE_MISS = 5
_DONE_HIT = 6


@dataclass
class RenderState:
    """Per-pixel rendering products; world coordinates in metres, NaN where invalid."""

    intrinsics: Intrinsics
    pose: Pose | None = None
    expected_range: np.ndarray | None = None
    points: np.ndarray | None = None
    normals: np.ndarray | None = None
    depth: np.ndarray | None = None
    colour: np.ndarray | None = None
    hit: np.ndarray | None = None
    # previous hit points for approximate (forward-projected) rendering
    forward_cache: np.ndarray | None = field(default=None, repr=False)

    @property
    def shape(self):
        return self.intrinsics.shape


def _as_field(field_):
    # snapshot a hash map once per render; chain walks are slow for bulk reads
    return field_.index() if isinstance(field_, VoxelBlockMap) else field_


def ranges_from_corners(corners_world: np.ndarray, pose: Pose, intrinsics: Intrinsics,
                        zmin: float = 0.2, zmax: float = 3.0) -> np.ndarray:
    """Min/max depth image from 3-D boxes given by their 8 world corners.

    Each box's projected 2-D bounding box is cut into 16x16 fragments which
    are then merged into the image with running min/max. Returns
    ``(H, W, 2)`` with NaN where no box projects.
    """
    H, W = intrinsics.shape
    out = np.full((H, W, 2), np.nan)
    corners_world = np.asarray(corners_world, dtype=np.float64).reshape(-1, 8, 3)
    if len(corners_world) == 0:
        return out
    cam = pose.apply(corners_world)
    u, v, z = intrinsics.project(cam)
    keep = (z.max(axis=1) >= zmin) & (z.min(axis=1) <= zmax)
    u, v, z = u[keep], v[keep], z[keep]
    if len(z) == 0:
        return out
    behind = (z < zmin).any(axis=1)
    x0 = np.where(behind, 0, np.floor(np.nan_to_num(u.min(axis=1), nan=0, neginf=0, posinf=W)))
    x1 = np.where(behind, W - 1, np.ceil(np.nan_to_num(u.max(axis=1), nan=W, neginf=0, posinf=W)))
    y0 = np.where(behind, 0, np.floor(np.nan_to_num(v.min(axis=1), nan=0, neginf=0, posinf=H)))
    y1 = np.where(behind, H - 1, np.ceil(np.nan_to_num(v.max(axis=1), nan=H, neginf=0, posinf=H)))
    x0, x1 = np.clip(x0, 0, W - 1).astype(np.int64), np.clip(x1, -1, W - 1).astype(np.int64)
    y0, y1 = np.clip(y0, 0, H - 1).astype(np.int64), np.clip(y1, -1, H - 1).astype(np.int64)
    bz0 = np.maximum(z.min(axis=1), zmin)
    bz1 = np.minimum(z.max(axis=1), zmax)
    ok = (x1 >= x0) & (y1 >= y0) & (u.max(axis=1) >= -0.5) & (u.min(axis=1) <= W - 0.5) \
        & (v.max(axis=1) >= -0.5) & (v.min(axis=1) <= H - 0.5)
    ok |= behind & (x1 >= x0)
    x0, x1, y0, y1, bz0, bz1 = (a[ok] for a in (x0, x1, y0, y1, bz0, bz1))

    # fragment list: one entry per 16x16 tile of each bounding box
    nfx = (x1 - x0) // FRAGMENT + 1
    nfy = (y1 - y0) // FRAGMENT + 1
    counts = nfx * nfy
    owner = np.repeat(np.arange(len(counts)), counts)
    k = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    fx0 = x0[owner] + (k % nfx[owner]) * FRAGMENT
    fy0 = y0[owner] + (k // nfx[owner]) * FRAGMENT
    fx1 = np.minimum(fx0 + FRAGMENT - 1, x1[owner])
    fy1 = np.minimum(fy0 + FRAGMENT - 1, y1[owner])
    fz0, fz1 = bz0[owner], bz1[owner]

    lo = np.full(H * W, np.inf)
    hi = np.full(H * W, -np.inf)
    for dy in range(FRAGMENT):
        for dx in range(FRAGMENT):
            m = (fx0 + dx <= fx1) & (fy0 + dy <= fy1)
            if not m.any():
                continue
            pix = (fy0[m] + dy) * W + fx0[m] + dx
            np.minimum.at(lo, pix, fz0[m])
            np.maximum.at(hi, pix, fz1[m])
    set_ = np.isfinite(lo)
    out[..., 0].flat[set_] = lo[set_]
    out[..., 1].flat[set_] = hi[set_]
    return out


def render_expected_ranges(vmap: VoxelBlockMap, pose: Pose, intrinsics: Intrinsics, entries=None,
                           zmin: float = 0.2, zmax: float = 3.0) -> np.ndarray:
    """Expected depth range per pixel from the visible blocks (or ``entries``)."""
    entries = vmap.visible_entries if entries is None else np.asarray(entries, dtype=np.int64)
    return ranges_from_corners(block_corners(vmap, entries), pose, intrinsics, zmin, zmax)


def march(field_, origins, dirs, t_min, t_max, mu: float, min_step: float = 1.0, refine_steps: int = 2):
    """Vectorised ray marching in voxel units.

    ``origins`` and unit ``dirs`` are ``(N, 3)`` in voxel coordinates and
    ``t_min``/``t_max`` are distances along the ray in voxels. Returns
    ``(t_hit, hit, final_state)``; ``t_hit`` is NaN on a miss.
    """
    field_ = _as_field(field_)
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(origins)
    t = np.broadcast_to(np.asarray(t_min, dtype=np.float64), (n,)).copy()
    t_max = np.broadcast_to(np.asarray(t_max, dtype=np.float64), (n,))
    fine = mu / field_.voxel_size
    state = np.full(n, int(RayState.SEARCH_BLOCK_COARSE))
    prev_t = np.full(n, np.nan)
    prev_sdf = np.full(n, np.nan)
    cur_sdf = np.full(n, np.nan)
    valid_range = np.isfinite(t) & np.isfinite(t_max) & (t <= t_max)
    state[~valid_range] = _DONE_MISS

    # a ray starting inside allocated space skips the coarse search
    start = np.flatnonzero(valid_range)
    if start.size:
        _, alloc = field_.probe(origins[start] + dirs[start] * t[start, None])
        state[start[alloc]] = RayState.SEARCH_BLOCK_FINE

    while True:
        act = np.flatnonzero(state <= RayState.SEARCH_SURFACE)
        if act.size == 0:
            break
        out = t[act] > t_max[act]
        state[act[out]] = _DONE_MISS
        act = act[~out]
        if act.size == 0:
            break
        sdf, alloc = field_.probe(origins[act] + dirs[act] * t[act, None])
        st = state[act]

        coarse = st == RayState.SEARCH_BLOCK_COARSE
        c_free, c_hit = act[coarse & ~alloc], act[coarse & alloc]
        t[c_free] += 8.0
        t[c_hit] -= 8.0
        state[c_hit] = RayState.SEARCH_BLOCK_FINE

        searching = (st == RayState.SEARCH_BLOCK_FINE) | (st == RayState.SEARCH_SURFACE)
        free = act[searching & ~alloc]
        t[free] += fine
        state[free] = RayState.SEARCH_BLOCK_FINE

        wrong = (st == RayState.SEARCH_BLOCK_FINE) & alloc & (sdf < 0)
        state[act[wrong]] = RayState.WRONG_SIDE

        behind = (st == RayState.SEARCH_SURFACE) & alloc & (sdf <= 0)
        state[act[behind]] = RayState.BEHIND_SURFACE
        cur_sdf[act[behind]] = sdf[behind]

        front = searching & alloc & ~wrong & ~behind
        fa = act[front]
        prev_t[fa] = t[fa]
        prev_sdf[fa] = sdf[front]
        t[fa] += np.maximum(sdf[front] * fine, min_step)
        state[fa] = RayState.SEARCH_SURFACE

    hit_idx = np.flatnonzero(state == RayState.BEHIND_SURFACE)
    t_hit = np.full(n, np.nan)
    if hit_idx.size:
        ta, sa = prev_t[hit_idx], prev_sdf[hit_idx]
        tb, sb = t[hit_idx].copy(), cur_sdf[hit_idx]
        tn = tb.copy()
        for _ in range(refine_steps):
            den = sa - sb
            tn = np.where(den > 0, ta + (tb - ta) * sa / np.where(den > 0, den, 1), tb)
            sn, _ = field_.probe(origins[hit_idx] + dirs[hit_idx] * tn[:, None])
            pos = sn > 0
            ta, sa = np.where(pos, tn, ta), np.where(pos, sn, sa)
            tb, sb = np.where(pos, tb, tn), np.where(pos, sb, sn)
        t_hit[hit_idx] = tn
    hit = np.isfinite(t_hit)
    final = np.where(hit, int(RayState.BEHIND_SURFACE), np.where(state == _DONE_MISS, -1, state))
    return t_hit, hit, final


def cast_ray(field_, origin, direction, depth_range, mu: float, voxel_size: float | None = None,
             min_step: float = 1.0):
    """Single ray in metres; returns ``(hit point in voxel coordinates, hit)``."""
    vs = field_.voxel_size if voxel_size is None else voxel_size
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    o = np.asarray(origin, dtype=np.float64) / vs
    t, hit, _ = march(field_, o[None], d[None], depth_range[0] / vs, depth_range[1] / vs, mu, min_step)
    if not hit[0]:
        return None, False
    return o + d * t[0], True


def surface_normals(field_, points_vox) -> np.ndarray:
    """Normalised sdf gradient (central differences of trilinear samples); NaN if unavailable."""
    field_ = _as_field(field_)
    p = np.asarray(points_vox, dtype=np.float64).reshape(-1, 3)
    g = np.zeros_like(p)
    ok = np.ones(len(p), dtype=bool)
    for axis in range(3):
        e = np.zeros(3)
        e[axis] = 1.0
        a, va = field_.sample(p + e)[:2]
        b, vb = field_.sample(p - e)[:2]
        g[:, axis] = a - b
        ok &= va & vb
    norm = np.linalg.norm(g, axis=1, keepdims=True)
    ok &= norm[:, 0] > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        n = g / norm
    n[~ok] = np.nan
    return n


def render_maps(field_, pose: Pose, intrinsics: Intrinsics, state: RenderState | None = None, *,
                mu: float = 0.02, mode: str = "icp_maps", expected_range=None, min_step: float = 1.0,
                approximate: bool = False) -> RenderState:
    """Raycast every pixel that has an expected range.

    ``mode`` is ``"icp_maps"`` (points and normals), ``"color"`` (adds voxel
    colour) or ``"grey"`` (adds a shaded grey image in ``colour``).
    With ``approximate``, pixels covered by forward projection of the
    previous render are reused and only the rest are raycast.
    """
    if mode not in ("icp_maps", "color", "grey"):
        raise ValueError(f"unknown render mode {mode!r}")
    field_ = _as_field(field_)
    state = state or RenderState(intrinsics)
    if expected_range is None:
        expected_range = state.expected_range
    if expected_range is None:
        raise ValueError("no expected range; call render_expected_ranges first")
    H, W = intrinsics.shape
    vs = field_.voxel_size
    cam_to_world = pose.inverse()
    rays = intrinsics.rays().reshape(-1, 3)
    rnorm = np.linalg.norm(rays, axis=1)
    dirs = (rays / rnorm[:, None]) @ cam_to_world.rotation.T
    origin = cam_to_world.translation / vs
    rng = np.asarray(expected_range).reshape(-1, 2)

    points = np.full((H * W, 3), np.nan)
    todo = np.flatnonzero(np.isfinite(rng).all(axis=1))
    if approximate and state.forward_cache is not None:
        fwd, missing = forward_project(state, pose, intrinsics)
        fwd = fwd.reshape(-1, 3)
        have = np.isfinite(fwd).all(axis=1)
        points[have] = fwd[have]
        todo = np.intersect1d(todo, missing)
    if todo.size:
        t, hit, _ = march(field_, np.broadcast_to(origin, (todo.size, 3)), dirs[todo],
                          rng[todo, 0] * rnorm[todo] / vs, rng[todo, 1] * rnorm[todo] / vs, mu, min_step)
        idx = todo[hit]
        points[idx] = (origin + dirs[idx] * t[hit, None]) * vs

    hit = np.isfinite(points).all(axis=1)
    normals = np.full((H * W, 3), np.nan)
    normals[hit] = surface_normals(field_, points[hit] / vs)
    depth = np.full(H * W, -1.0)
    depth[hit] = pose.apply(points[hit])[:, 2]

    state.pose = pose
    state.expected_range = np.asarray(expected_range).reshape(H, W, 2)
    state.points = points.reshape(H, W, 3)
    state.normals = normals.reshape(H, W, 3)
    state.depth = depth.reshape(H, W)
    state.hit = hit.reshape(H, W)
    state.forward_cache = state.points.copy()
    state.colour = None
    if mode == "color":
        colour = np.zeros((H * W, 3))
        if hit.any():
            _, _, c = field_.sample(points[hit] / vs, with_colour=True)
            colour[hit] = c
        state.colour = np.clip(np.rint(colour), 0, 255).astype(np.uint8).reshape(H, W, 3)
    elif mode == "grey":
        grey = np.zeros(H * W)
        shade = -np.sum(normals[hit] * dirs[hit], axis=1)
        grey[hit] = (0.8 * np.clip(np.nan_to_num(shade), 0, 1) + 0.2) * 255
        state.colour = np.rint(grey).astype(np.uint8).reshape(H, W)
    return state


def forward_project(state: RenderState, pose: Pose, intrinsics: Intrinsics):
    """Reproject the previous hit points into a new view.

    Returns the point map ``(H, W, 3)`` (NaN where nothing lands, nearest
    point wins) and the flat indices of pixels still needing a raycast.
    """
    H, W = intrinsics.shape
    out = np.full((H * W, 3), np.nan)
    prev = state.forward_cache
    if prev is None:
        return out.reshape(H, W, 3), np.arange(H * W)
    pts = prev.reshape(-1, 3)
    pts = pts[np.isfinite(pts).all(axis=1)]
    u, v, z = intrinsics.project(pose.apply(pts))
    ui = np.floor(u + 0.5)
    vi = np.floor(v + 0.5)
    ok = (z > 0) & (ui >= 0) & (ui < W) & (vi >= 0) & (vi < H)
    pix = (vi[ok] * W + ui[ok]).astype(np.int64)
    zs, pts = z[ok], pts[ok]
    order = np.lexsort((zs, pix))
    pix, pts = pix[order], pts[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    out[pix[first]] = pts[first]
    missing = np.flatnonzero(~np.isfinite(out).all(axis=1))
    return out.reshape(H, W, 3), missing


def render_depth(vmap: VoxelBlockMap, pose: Pose, intrinsics: Intrinsics, params, entries=None) -> np.ndarray:
    """Convenience: expected ranges from all resident blocks, then a depth image (-1 on miss)."""
    if entries is None:
        entries = vmap.allocated_entries()
    rng = render_expected_ranges(vmap, pose, intrinsics, entries, params.view_frustum_min, params.view_frustum_max)
    return render_maps(vmap, pose, intrinsics, mu=params.mu, expected_range=rng).depth
