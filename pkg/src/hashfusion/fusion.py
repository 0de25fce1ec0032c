"""Per-frame block allocation and TSDF integration."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .core import Intrinsics, Pose, View
from .validation import check_pose, check_view
from .voxelmap import (BLOCK_SIZE, PTR_SWAPPED, SDF_SCALE, VISIBLE_IN_MEMORY, VISIBLE_SWAPPED,
                       AllocationError, Voxel, VoxelBlockMap, block_visibility, pack_block_keys,
                       sdf_to_stored, unpack_block_keys)


@dataclass(frozen=True)
class SceneParams:
    voxel_size: float = 0.005
    mu: float = 0.02
    max_w: int = 100
    view_frustum_min: float = 0.2
    view_frustum_max: float = 3.0
    stop_integrating_at_max_w: bool = False

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError("mu must be positive")
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if not self.view_frustum_min < self.view_frustum_max:
            raise ValueError("view_frustum_min must be below view_frustum_max")
        if not 0 < self.max_w <= 255:
            raise ValueError("max_w must be in [1, 255]")


@dataclass
class AllocationScratch:
    """Per-entry requests gathered in the first allocation pass."""

    alloc_type: np.ndarray
    block_coords: np.ndarray
    visibility: np.ndarray

    @classmethod
    def for_map(cls, vmap: VoxelBlockMap) -> AllocationScratch:
        n = vmap.n_entries
        return cls(np.zeros(n, np.uint8), np.zeros((n, 3), np.int32), np.zeros(n, np.uint8))


def segment_blocks(start: np.ndarray, end: np.ndarray) -> np.ndarray:
    """Integer cells crossed by each segment (coordinates in cell units).

    Exact traversal: every cell the open segment passes through, plus the
    cells of both endpoints. Returns unique cells, ``(K, 3)``.
    """
    start = np.asarray(start, dtype=np.float64).reshape(-1, 3)
    end = np.asarray(end, dtype=np.float64).reshape(-1, 3)
    if len(start) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    d = end - start
    lo = np.floor(np.minimum(start, end))
    hi = np.floor(np.maximum(start, end))
    K = int((hi - lo).max()) if len(start) else 0
    ts = [np.zeros((len(start), 1)), np.ones((len(start), 1))]
    for axis in range(3):
        for j in range(K):
            plane = lo[:, axis] + 1 + j
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (plane - start[:, axis]) / d[:, axis]
            ts.append(np.where(plane <= hi[:, axis], t, np.nan)[:, None])
    ts = np.sort(np.concatenate(ts, axis=1), axis=1)
    mids = 0.5 * (ts[:, 1:] + ts[:, :-1])
    pts = start[:, None, :] + mids[..., None] * d[:, None, :]
    cells = [np.floor(start), np.floor(end), np.floor(pts[np.isfinite(mids)])]
    cells = np.concatenate(cells).astype(np.int64)
    return unpack_block_keys(np.unique(pack_block_keys(cells)))


def depth_segments(view: View, pose: Pose, params: SceneParams) -> tuple[np.ndarray, np.ndarray]:
    """World-space ``d - mu`` and ``d + mu`` points of every usable depth pixel, in block units."""
    depth = view.depth_m.astype(np.float64)
    ok = (depth > 0) & (depth >= params.view_frustum_min) & (depth <= params.view_frustum_max)
    rays = view.intrinsics.rays()[ok]
    d = depth[ok][:, None]
    cam_to_world = pose.inverse()
    scale = 1.0 / (params.voxel_size * BLOCK_SIZE)
    a = cam_to_world.apply(rays * (d - params.mu)) * scale
    b = cam_to_world.apply(rays * (d + params.mu)) * scale
    return a, b


def allocate_from_depth(vmap: VoxelBlockMap, view: View, pose: Pose, params: SceneParams, *,
                        swap_margin: float | None = None, scratch: AllocationScratch | None = None) -> np.ndarray:
    """Allocate blocks around the observed surface and rebuild the visible list.

    Only one block is allocated per hash entry per call, so colliding
    requests within one frame are resolved over successive frames.
    ``swap_margin`` (pixels) enables the enlarged visibility test used to
    prefetch swapped-out blocks. Returns the visible entry indices.
    """
    scratch = scratch or AllocationScratch.for_map(vmap)
    a, b = depth_segments(view, pose, params)
    needed = segment_blocks(a, b)

    # pass 1: classify requested blocks
    found = vmap.find_entries(needed, min_ptr=PTR_SWAPPED)
    seen = found[found >= 0]
    scratch.visibility[seen] = np.where(vmap.entry_ptr[seen] >= 0, VISIBLE_IN_MEMORY, VISIBLE_SWAPPED)
    missing = needed[found < 0]
    if len(missing):
        kind, target = vmap.insertion_targets(missing)
        # last writer wins on each target entry
        scratch.alloc_type[target] = kind
        scratch.block_coords[target] = missing

    # pass 2: reserve blocks
    marked = np.flatnonzero(scratch.alloc_type)
    new_entries = []
    for e in marked:
        try:
            new_entries.append(vmap.commit_insertion(int(scratch.alloc_type[e]), int(e), scratch.block_coords[e]))
        except AllocationError:
            break
    scratch.alloc_type[marked] = 0
    # swapped-out blocks observed again get a fresh resident block; host data merges on swap-in
    swapped = seen[vmap.entry_ptr[seen] == PTR_SWAPPED]
    for e in swapped:
        try:
            vmap.entry_ptr[e] = vmap.pop_block()
        except AllocationError:
            break

    # pass 3: visible list, built the same way with or without swapping
    cand = np.unique(np.concatenate([seen, np.asarray(new_entries, dtype=np.int64),
                                     vmap.visible_entries]).astype(np.int64))
    cand = cand[vmap.entry_ptr[cand] >= 0]
    vis = block_visibility(vmap, cand, pose, view.intrinsics, params.view_frustum_min, params.view_frustum_max)
    vmap.visibility[vmap.visible_entries] = 0
    vmap.visibility[vmap.prefetch_entries] = 0
    vmap.visibility[scratch.visibility.nonzero()[0]] = 0
    scratch.visibility[:] = 0
    vmap.visible_entries = cand[vis]
    vmap.visibility[vmap.visible_entries] = VISIBLE_IN_MEMORY
    vmap.prefetch_entries = np.zeros(0, dtype=np.int64)
    if swap_margin is not None:
        # swapped-out blocks inside the enlarged view get storage now so their host data can
        # come back before they are observed; they are not integrated until they are
        out = np.flatnonzero(vmap.entry_ptr == PTR_SWAPPED)
        near = out[block_visibility(vmap, out, pose, view.intrinsics, params.view_frustum_min,
                                    params.view_frustum_max, margin=swap_margin)]
        fetched = []
        for e in near:
            try:
                vmap.entry_ptr[e] = vmap.pop_block()
            except AllocationError:
                break
            fetched.append(e)
        vmap.prefetch_entries = np.asarray(fetched, dtype=np.int64)
        vmap.visibility[vmap.prefetch_entries] = VISIBLE_SWAPPED
    return vmap.visible_entries


def update_visible_list(vmap: VoxelBlockMap, pose: Pose, intrinsics, params: SceneParams) -> np.ndarray:
    """Rebuild the visible list from every resident block, without allocating; for frames not fused."""
    cand = vmap.allocated_entries(min_ptr=0)
    vis = block_visibility(vmap, cand, pose, intrinsics, params.view_frustum_min, params.view_frustum_max)
    vmap.visibility[vmap.visible_entries] = 0
    vmap.visibility[vmap.prefetch_entries] = 0
    vmap.prefetch_entries = np.zeros(0, dtype=np.int64)
    cand = cand[vis]
    vmap.visibility[cand] = VISIBLE_IN_MEMORY
    vmap.visible_entries = cand
    return cand


def update_voxel_depth(voxel: Voxel, pt_model, M_d: Pose, proj: Intrinsics, mu: float, max_w: int,
                       depth: np.ndarray) -> float:
    """Fuse one depth observation into ``voxel`` in place; returns eta or -1."""
    pt_camera = M_d.apply(np.asarray(pt_model, dtype=np.float64)[:3])
    if pt_camera[2] <= 0:
        return -1.0
    x = proj.fx * pt_camera[0] / pt_camera[2] + proj.cx
    y = proj.fy * pt_camera[1] / pt_camera[2] + proj.cy
    h, w = depth.shape
    if x < 1 or x > w - 2 or y < 1 or y > h - 2:
        return -1.0
    depth_measure = float(depth[int(y + 0.5), int(x + 0.5)])
    if depth_measure <= 0.0:
        return -1.0
    eta = depth_measure - pt_camera[2]
    if eta < -mu:
        return eta
    old_f, old_w = voxel.sdf, voxel.w_depth
    new_f = min(1.0, eta / mu)
    new_w = 1
    new_f = old_w * old_f + new_w * new_f
    new_w = old_w + new_w
    new_f /= new_w
    new_w = min(new_w, max_w)
    voxel.sdf = float(sdf_to_stored(new_f)) / SDF_SCALE
    voxel.w_depth = new_w
    return eta


def integrate_frame(vmap: VoxelBlockMap, view: View, pose: Pose, params: SceneParams,
                    entries=None, chunk: int = 2048) -> int:
    """Fuse ``view`` into every voxel of the visible blocks; returns updated voxel count."""
    entries = vmap.visible_entries if entries is None else np.asarray(entries, dtype=np.int64)
    entries = entries[vmap.entry_ptr[entries] >= 0]
    depth = view.depth_m
    intr = view.intrinsics
    h, w = depth.shape
    rgb = view.rgb
    colour_pose = view.calib.extrinsics_d_to_rgb @ pose
    intr_rgb = view.calib.intrinsics_rgb
    updated = 0
    for s in range(0, len(entries), chunk):
        ent = entries[s:s + chunk]
        ptr = vmap.entry_ptr[ent]
        pts = vmap.block_voxel_coords(ent).reshape(-1, 3) * vmap.voxel_size
        cam = pose.apply(pts)
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            x = intr.fx * cam[:, 0] / z + intr.cx
            y = intr.fy * cam[:, 1] / z + intr.cy
        ok = (z > 0) & (x >= 1) & (x <= w - 2) & (y >= 1) & (y <= h - 2)
        xi = np.where(ok, x + 0.5, 0).astype(np.int64)
        yi = np.where(ok, y + 0.5, 0).astype(np.int64)
        dm = np.where(ok, depth[yi, xi], -1.0).astype(np.float64)
        ok &= dm > 0
        eta = dm - z
        ok &= eta >= -params.mu
        sdf = vmap.sdf[ptr].reshape(-1)
        wd = vmap.w_depth[ptr].reshape(-1).astype(np.int64)
        if params.stop_integrating_at_max_w:
            ok &= wd < params.max_w
        idx = np.flatnonzero(ok)
        old_f = sdf[idx] / SDF_SCALE
        old_w = wd[idx]
        new_f = np.minimum(1.0, eta[idx] / params.mu)
        new_f = (old_w * old_f + new_f) / (old_w + 1)
        sdf[idx] = sdf_to_stored(new_f)
        wd[idx] = np.minimum(old_w + 1, params.max_w)
        vmap.sdf[ptr] = sdf.reshape(-1, 512)
        vmap.w_depth[ptr] = wd.reshape(-1, 512).astype(np.uint8)
        updated += len(idx)
        if rgb is not None:
            _integrate_colour(vmap, ptr, pts, eta, ok, rgb, colour_pose, intr_rgb, params)
    return updated


def _integrate_colour(vmap, ptr, pts, eta, ok, rgb, colour_pose, intr_rgb, params):
    ok = ok & (eta <= params.mu)
    cam = colour_pose.apply(pts)
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        x = intr_rgb.fx * cam[:, 0] / z + intr_rgb.cx
        y = intr_rgb.fy * cam[:, 1] / z + intr_rgb.cy
    ok &= (z > 0) & (x >= 0) & (x <= intr_rgb.width - 1) & (y >= 0) & (y <= intr_rgb.height - 1)
    idx = np.flatnonzero(ok)
    if idx.size == 0:
        return
    obs = rgb[(y[idx] + 0.5).astype(np.int64), (x[idx] + 0.5).astype(np.int64)].astype(np.float64)
    clr = vmap.clr[ptr].reshape(-1, 3)
    wc = vmap.w_color[ptr].reshape(-1).astype(np.int64)
    old_w = wc[idx][:, None]
    new_c = (old_w * clr[idx] + obs) / (old_w + 1)
    clr[idx] = np.clip(np.rint(new_c), 0, 255).astype(np.uint8)
    wc[idx] = np.minimum(wc[idx] + 1, params.max_w)
    vmap.clr[ptr] = clr.reshape(-1, 512, 3)
    vmap.w_color[ptr] = wc.reshape(-1, 512).astype(np.uint8)


def fuse(vmap: VoxelBlockMap, view: View, pose: Pose, params: SceneParams, **kwargs) -> np.ndarray:
    """Allocation followed by integration."""
    visible = allocate_from_depth(vmap, view, pose, params, **kwargs)
    integrate_frame(vmap, view, pose, params)
    return visible


class TSDFFusion(BaseEstimator):
    """Incremental TSDF fusion of posed views.

    ``fit`` consumes a sequence of views with their world-to-camera poses;
    ``predict`` renders depth from a new viewpoint.
    """

    def __init__(self, voxel_size=0.005, mu=0.02, max_w=100, view_frustum_min=0.2,
                 view_frustum_max=3.0, bucket_count=2 ** 20, excess_count=2 ** 17, block_capacity=2 ** 18):
        self.voxel_size = voxel_size
        self.mu = mu
        self.max_w = max_w
        self.view_frustum_min = view_frustum_min
        self.view_frustum_max = view_frustum_max
        self.bucket_count = bucket_count
        self.excess_count = excess_count
        self.block_capacity = block_capacity

    def _params(self) -> SceneParams:
        return SceneParams(self.voxel_size, self.mu, self.max_w, self.view_frustum_min, self.view_frustum_max)

    def fit(self, views, poses):
        views, poses = list(views), list(poses)
        if len(views) != len(poses):
            raise ValueError(f"got {len(views)} views but {len(poses)} poses")
        self.map_ = VoxelBlockMap(self.voxel_size, self.bucket_count, self.excess_count, self.block_capacity)
        self.params_ = self._params()
        self.n_frames_ = 0
        for v, p in zip(views, poses):
            self.partial_fit(v, p)
        return self

    def partial_fit(self, view, pose):
        if not hasattr(self, "map_"):
            return self.fit([view], [pose])
        check_view(view)
        check_pose(pose)
        fuse(self.map_, view, pose, self.params_)
        self.n_frames_ += 1
        return self

    def predict(self, pose, intrinsics):
        """Depth image rendered by raycasting the fused map."""
        from .raycast import render_depth

        self._check_fitted()
        return render_depth(self.map_, pose, intrinsics, self.params_)

    def mesh(self):
        self._check_fitted()
        return self.map_.extract_mesh()

    def _check_fitted(self):
        if not hasattr(self, "map_"):
            from sklearn.exceptions import NotFittedError
            raise NotFittedError("TSDFFusion is not fitted yet")
