"""Surfel map: index-map association, confidence-weighted fusion, removal and merging."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .core import Intrinsics, Pose, View
from .io.mesh import write_point_cloud
from .raycast import RenderState

MAX_SURFEL_COUNT = 5_000_000
# samples this close (per axis, in samples) to a projected centre always belong to that splat
CENTRE_REACH = 0.5 + 1e-9


@dataclass(frozen=True)
class SurfelParams:
    supersample: int = 4
    normal_gate: float = 0.7          # minimum cosine between surfel and point normals
    depth_gate: float = 0.01          # metres, along the camera axis
    alpha_policy: str = "constant"    # constant | radial
    radial_sigma: float = 0.6
    stable_confidence: float = 10.0
    max_age: int = 30
    capacity: int = MAX_SURFEL_COUNT

    def __post_init__(self):
        if self.supersample < 1:
            raise ValueError("supersample must be >= 1")
        if self.alpha_policy not in ("constant", "radial"):
            raise ValueError(f"unknown alpha policy {self.alpha_policy!r}")
        if not 0 < self.capacity <= MAX_SURFEL_COUNT:
            raise ValueError(f"capacity must be in (0, {MAX_SURFEL_COUNT}]")


class SurfelScene:
    """Growable surfel arrays; ``positions`` etc. are views of the live prefix."""

    _FIELDS = (("_pos", (3,), np.float64), ("_nrm", (3,), np.float64), ("_rad", (), np.float64),
               ("_conf", (), np.float64), ("_time", (), np.int64), ("_clr", (3,), np.uint8))

    def __init__(self, capacity: int = MAX_SURFEL_COUNT):
        self.capacity = capacity
        self.count = 0
        self.dropped = 0
        for name, shape, dt in self._FIELDS:
            setattr(self, name, np.zeros((0,) + shape, dtype=dt))

    def _reserve(self, n: int):
        have = len(self._pos)
        if n <= have:
            return
        size = min(self.capacity, max(n, 2 * have, 1024))
        for name, shape, dt in self._FIELDS:
            old = getattr(self, name)
            new = np.zeros((size,) + shape, dtype=dt)
            new[:self.count] = old[:self.count]
            setattr(self, name, new)

    positions = property(lambda self: self._pos[:self.count])
    normals = property(lambda self: self._nrm[:self.count])
    radii = property(lambda self: self._rad[:self.count])
    confidences = property(lambda self: self._conf[:self.count])
    timestamps = property(lambda self: self._time[:self.count])
    colours = property(lambda self: self._clr[:self.count])

    def append(self, positions, normals, radii, confidences, timestamp: int, colours=None) -> int:
        """Append surfels up to capacity; the rest are counted in ``dropped``. Returns the number added."""
        n = len(positions)
        room = self.capacity - self.count
        k = min(n, room)
        self.dropped += n - k
        if k == 0:
            return 0
        self._reserve(self.count + k)
        s = slice(self.count, self.count + k)
        self._pos[s] = positions[:k]
        self._nrm[s] = normals[:k]
        self._rad[s] = radii[:k]
        self._conf[s] = confidences[:k]
        self._time[s] = timestamp
        self._clr[s] = 0 if colours is None else colours[:k]
        self.count += k
        return k

    def keep(self, mask: np.ndarray):
        """Compact to the surfels where ``mask`` is true, preserving order."""
        idx = np.flatnonzero(mask)
        for name, _, _ in self._FIELDS:
            arr = getattr(self, name)
            arr[:len(idx)] = arr[idx]
        self.count = len(idx)

    def export(self, path):
        write_point_cloud(path, self.positions, self.normals, self.radii, self.confidences, self.colours)


@dataclass
class IndexMap:
    index: np.ndarray                 # (H*s, W*s) surfel index, -1 where empty
    depth: np.ndarray                 # matching camera depth, inf where empty
    scale: int
    intrinsics: Intrinsics = field(repr=False, default=None)

    def at_pixels(self, u, v) -> np.ndarray:
        """Indices in the ``scale`` x ``scale`` block of each original pixel ``(u, v)``, shape ``(N, scale**2)``."""
        s = self.scale
        dy, dx = np.divmod(np.arange(s * s), s)
        return self.index[np.asarray(v)[:, None] * s + dy, np.asarray(u)[:, None] * s + dx]


def supersampled(intrinsics: Intrinsics, scale: int) -> Intrinsics:
    """Intrinsics of the grid with ``scale`` x ``scale`` samples per pixel."""
    return Intrinsics(intrinsics.width * scale, intrinsics.height * scale, intrinsics.fx * scale,
                      intrinsics.fy * scale, (intrinsics.cx + 0.5) * scale - 0.5, (intrinsics.cy + 0.5) * scale - 0.5)


def surfel_radius(z, focal: float):
    """Footprint of one pixel at depth ``z``."""
    return np.sqrt(2.0) * np.asarray(z, dtype=np.float64) / focal


def splat_footprints(scene: SurfelScene, pose: Pose, grid: Intrinsics):
    """Samples covered by each surfel's disc.

    Candidates are the samples whose centres lie within the projected
    circle of radius ``r * f / z``; a candidate is kept when its ray meets
    the disc itself, so steep discs cover a thin ellipse and do not hide
    their neighbours. Samples within half a sample of the projected centre
    (up to four when it falls on a corner) are always covered, at the
    centre depth. Returns flat pixel ids, surfel ids,
    camera depths along the optical axis and squared distances to the
    projected centre, one row per covered sample.
    """
    cam = pose.apply(scene.positions)
    u, v, z = grid.project(cam)
    front = np.flatnonzero(z > 0)
    cam, u, v, z = cam[front], u[front], v[front], z[front]
    rad = scene.radii[front]
    R = rad * grid.fx / z
    W, H = grid.width, grid.height
    reach = np.maximum(R, CENTRE_REACH)
    x0 = np.maximum(np.floor(u - reach), 0)
    x1 = np.minimum(np.ceil(u + reach), W - 1)
    y0 = np.maximum(np.floor(v - reach), 0)
    y1 = np.minimum(np.ceil(v + reach), H - 1)
    ok = (x1 >= x0) & (y1 >= y0)
    nx = np.where(ok, x1 - x0 + 1, 0).astype(np.int64)
    ny = np.where(ok, y1 - y0 + 1, 0).astype(np.int64)
    counts = nx * ny
    owner = np.repeat(np.arange(len(front)), counts)
    k = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    px = x0[owner] + k % nx[owner]
    py = y0[owner] + k // nx[owner]
    centre = (np.abs(px - u[owner]) <= CENTRE_REACH) & (np.abs(py - v[owner]) <= CENTRE_REACH)
    inside = ((px - u[owner]) ** 2 + (py - v[owner]) ** 2 <= R[owner] ** 2) | centre
    owner, px, py, centre = owner[inside], px[inside], py[inside], centre[inside]

    # ray through the sample (z = 1) against the disc plane
    n_cam = (scene.normals[front] @ pose.rotation.T)[owner]
    ray = np.stack([(px - grid.cx) / grid.fx, (py - grid.cy) / grid.fy, np.ones(len(px))], axis=1)
    den = np.sum(n_cam * ray, axis=1)
    num = np.sum(n_cam * cam[owner], axis=1)
    facing = np.abs(den) > 1e-12
    zs = np.where(facing, num / np.where(facing, den, 1.0), np.inf)
    off = ray * zs[:, None] - cam[owner]
    on_disc = facing & (zs > 0) & (np.einsum("ij,ij->i", off, off) <= rad[owner] ** 2)
    zs = np.where(centre, z[owner], zs)
    keep = on_disc | centre
    owner, px, py, zs = owner[keep], px[keep], py[keep], zs[keep]
    d2 = (px - u[owner]) ** 2 + (py - v[owner]) ** 2
    return (py * W + px).astype(np.int64), front[owner], zs, d2


def build_index_map(scene: SurfelScene, pose: Pose, intrinsics: Intrinsics, scale: int = 4) -> IndexMap:
    """Depth pass, then index pass: the nearest surfel wins each sample.

    Depths within one input-pixel footprint of the nearest count as the
    same surface; those go to the surfel whose projected centre is closest
    to the sample, then to the lowest index.
    """
    grid = supersampled(intrinsics, scale)
    H, W = grid.height, grid.width
    depth = np.full(H * W, np.inf)
    index = np.full(H * W, -1, dtype=np.int64)
    if scene.count:
        pix, sid, z, d2 = splat_footprints(scene, pose, grid)
        np.minimum.at(depth, pix, z)
        win = z <= depth[pix] + surfel_radius(depth[pix], intrinsics.fx)
        pix, sid, d2 = pix[win], sid[win], d2[win]
        best = np.full(H * W, np.inf)
        np.minimum.at(best, pix, d2)
        win = d2 == best[pix]
        cand = np.full(H * W, np.iinfo(np.int64).max)
        np.minimum.at(cand, pix[win], sid[win])
        hit = cand != np.iinfo(np.int64).max
        index[hit] = cand[hit]
    return IndexMap(index.reshape(H, W), depth.reshape(H, W), scale, grid)


def sample_confidence(intrinsics: Intrinsics, params: SurfelParams) -> np.ndarray:
    """Per-pixel alpha: 1, or a Gaussian of the normalised distance from the image centre."""
    if params.alpha_policy == "constant":
        return np.ones(intrinsics.shape)
    v, u = np.mgrid[0:intrinsics.height, 0:intrinsics.width].astype(float)
    d = np.hypot(u - intrinsics.cx, v - intrinsics.cy)
    gamma = d / np.hypot(intrinsics.width / 2.0, intrinsics.height / 2.0)
    return np.exp(-gamma ** 2 / (2 * params.radial_sigma ** 2))


def associate(scene: SurfelScene, pose: Pose, window: np.ndarray, pts_cam: np.ndarray, nrm: np.ndarray,
              params: SurfelParams) -> np.ndarray:
    """Pick one surfel per input point from its index-map window, or -1.

    Candidates must pass the normal and depth gates; the most confident
    wins, then the one nearest the point's viewing ray, then the lowest index.
    """
    n, k = window.shape
    best = np.full(n, -1, dtype=np.int64)
    ok = window >= 0
    if not ok.any():
        return best
    rows, cols = np.nonzero(ok)
    sid = window[rows, cols]
    s_cam = pose.apply(scene.positions[sid])
    gate = (np.sum(scene.normals[sid] * nrm[rows], axis=1) >= params.normal_gate) \
        & (np.abs(s_cam[:, 2] - pts_cam[rows, 2]) <= params.depth_gate)
    rows, sid, s_cam = rows[gate], sid[gate], s_cam[gate]
    if rows.size == 0:
        return best
    ray = pts_cam[rows] / np.linalg.norm(pts_cam[rows], axis=1, keepdims=True)
    off_ray = np.linalg.norm(np.cross(s_cam, ray), axis=1)
    order = np.lexsort((sid, off_ray, -scene.confidences[sid], rows))
    rows, sid = rows[order], sid[order]
    first = np.r_[True, rows[1:] != rows[:-1]]
    best[rows[first]] = sid[first]
    return best


@dataclass
class FuseStats:
    matched: int = 0
    inserted: int = 0
    dropped: int = 0


def fuse_frame(scene: SurfelScene, view: View, pose: Pose, timestamp: int, params: SurfelParams | None = None,
               index_map: IndexMap | None = None) -> FuseStats:
    """Fuse a frame: matched surfels take the confidence-weighted average, others are appended.

    Several pixels matching one surfel are folded in together, which gives
    the same average as applying them one after another.
    """
    params = params or SurfelParams()
    intr = view.intrinsics
    if index_map is None:
        index_map = build_index_map(scene, pose, intr, params.supersample)
    cam_to_world = pose.inverse()
    depth = view.depth_m
    normals = view.normals
    valid = (depth > 0) & np.isfinite(normals).all(axis=-1)
    vv, uu = np.nonzero(valid)
    pts_cam = intr.backproject(depth)[vv, uu]
    pts = cam_to_world.apply(pts_cam)
    nrm = normals[vv, uu] @ cam_to_world.rotation.T
    alpha = sample_confidence(intr, params)[vv, uu]
    rad = surfel_radius(pts_cam[:, 2], intr.fx)
    clr = view.rgb[vv, uu] if view.rgb is not None and view.rgb.shape[:2] == depth.shape else None

    cand = associate(scene, pose, index_map.at_pixels(uu, vv), pts_cam, nrm, params)
    match = cand >= 0
    stats = FuseStats()
    if match.any():
        sid = cand[match]
        a = alpha[match]
        n = scene.count
        acc_a = np.bincount(sid, weights=a, minlength=n)
        upd = np.flatnonzero(acc_a > 0)
        c_old = scene._conf[upd]
        tot = c_old + acc_a[upd]

        def blend(arr, vals):
            acc = np.zeros((n,) + vals.shape[1:])
            np.add.at(acc, sid, a.reshape((-1,) + (1,) * (vals.ndim - 1)) * vals)
            w_old = c_old.reshape((-1,) + (1,) * (vals.ndim - 1))
            t = tot.reshape(w_old.shape)
            return (w_old * arr[upd] + acc[upd]) / t

        scene._pos[upd] = blend(scene._pos, pts[match])
        nb = blend(scene._nrm, nrm[match])
        scene._nrm[upd] = nb / np.linalg.norm(nb, axis=1, keepdims=True)
        scene._rad[upd] = blend(scene._rad, rad[match])
        if clr is not None:
            scene._clr[upd] = np.clip(np.rint(blend(scene._clr.astype(np.float64), clr[match].astype(float))),
                                      0, 255).astype(np.uint8)
        scene._conf[upd] = tot
        scene._time[upd] = timestamp
        stats.matched = int(match.sum())
    new = ~match
    before = scene.dropped
    stats.inserted = scene.append(pts[new], nrm[new], rad[new], alpha[new], timestamp,
                                  clr[new] if clr is not None else None)
    stats.dropped = scene.dropped - before
    return stats


def remove_and_merge(scene: SurfelScene, t_now: int, params: SurfelParams | None = None,
                     pose: Pose | None = None, intrinsics: Intrinsics | None = None) -> tuple[int, int]:
    """Drop stale unstable surfels, then merge compatible surfels whose centres share an index-map sample.

    Merging needs the current ``pose`` and ``intrinsics``; within a sample,
    every surfel compatible with the lowest-index one is folded into it.
    Returns ``(removed, merged)``.
    """
    params = params or SurfelParams()
    stale = (scene.confidences < params.stable_confidence) & (t_now - scene.timestamps > params.max_age)
    removed = int(stale.sum())
    if removed:
        scene.keep(~stale)
    merged = 0
    if pose is None or intrinsics is None or scene.count < 2:
        return removed, merged
    grid = supersampled(intrinsics, params.supersample)
    cam = pose.apply(scene.positions)
    u, v, z = grid.project(cam)
    ok = (z > 0) & np.isfinite(u) & np.isfinite(v)
    px, py = np.rint(np.where(ok, u, -1)), np.rint(np.where(ok, v, -1))
    ok &= (px >= 0) & (px < grid.width) & (py >= 0) & (py < grid.height)
    ids = np.flatnonzero(ok)
    pix = (py[ids] * grid.width + px[ids]).astype(np.int64)
    order = np.lexsort((ids, pix))
    ids, pix = ids[order], pix[order]
    start = np.r_[0, np.flatnonzero(np.diff(pix)) + 1]
    sizes = np.diff(np.r_[start, len(pix)])
    alive = np.ones(scene.count, dtype=bool)
    for s0, sz in zip(start[sizes > 1], sizes[sizes > 1]):
        group = ids[s0:s0 + sz]
        head, rest = group[0], group[1:]
        comp = (scene.normals[rest] @ scene.normals[head] >= params.normal_gate) \
            & (np.abs(z[rest] - z[head]) <= params.depth_gate)
        members = np.r_[head, rest[comp]]
        if len(members) < 2:
            continue
        c = scene._conf[members]
        tot = c.sum()
        scene._pos[head] = (c[:, None] * scene._pos[members]).sum(axis=0) / tot
        nb = (c[:, None] * scene._nrm[members]).sum(axis=0)
        scene._nrm[head] = nb / np.linalg.norm(nb)
        scene._rad[head] = (c * scene._rad[members]).sum() / tot
        scene._clr[head] = np.clip(np.rint((c[:, None] * scene._clr[members]).sum(axis=0) / tot), 0, 255)
        scene._conf[head] = tot
        scene._time[head] = scene._time[members].max()
        alive[rest[comp]] = False
        merged += len(members) - 1
    if merged:
        scene.keep(alive)
    return removed, merged


def render_surfels(scene: SurfelScene, pose: Pose, intrinsics: Intrinsics) -> RenderState:
    """Point and normal maps (world frame) from an index map at image resolution, for tracking."""
    imap = build_index_map(scene, pose, intrinsics, 1)
    H, W = intrinsics.shape
    idx = imap.index.reshape(-1)
    hit = idx >= 0
    points = np.full((H * W, 3), np.nan)
    normals = np.full((H * W, 3), np.nan)
    points[hit] = scene.positions[idx[hit]]
    normals[hit] = scene.normals[idx[hit]]
    state = RenderState(intrinsics)
    state.pose = pose
    state.points = points.reshape(H, W, 3)
    state.normals = normals.reshape(H, W, 3)
    depth = np.full(H * W, -1.0)
    depth[hit] = imap.depth.reshape(-1)[hit]
    state.depth = depth.reshape(H, W)
    state.hit = hit.reshape(H, W)
    colour = np.zeros((H * W, 3), dtype=np.uint8)
    colour[hit] = scene.colours[idx[hit]]
    state.colour = colour.reshape(H, W, 3)
    return state


class SurfelFusion(BaseEstimator):
    """Estimator view: ``fit(views, poses)`` fuses frames, ``transform`` returns surfel positions."""

    def __init__(self, supersample=4, normal_gate=0.7, depth_gate=0.01, alpha_policy="constant",
                 stable_confidence=10.0, max_age=30, capacity=MAX_SURFEL_COUNT):
        self.supersample = supersample
        self.normal_gate = normal_gate
        self.depth_gate = depth_gate
        self.alpha_policy = alpha_policy
        self.stable_confidence = stable_confidence
        self.max_age = max_age
        self.capacity = capacity

    def _params(self) -> SurfelParams:
        return SurfelParams(self.supersample, self.normal_gate, self.depth_gate, self.alpha_policy,
                            stable_confidence=self.stable_confidence, max_age=self.max_age, capacity=self.capacity)

    def fit(self, views, poses):
        self.scene_ = SurfelScene(self.capacity)
        self.frame_ = 0
        for v, p in zip(views, poses):
            self.partial_fit(v, p)
        return self

    def partial_fit(self, view, pose):
        if not hasattr(self, "scene_"):
            self.scene_ = SurfelScene(self.capacity)
            self.frame_ = 0
        params = self._params()
        fuse_frame(self.scene_, view, pose, self.frame_, params)
        remove_and_merge(self.scene_, self.frame_, params, pose, view.intrinsics)
        self.frame_ += 1
        return self

    def transform(self, X=None) -> np.ndarray:
        return self.scene_.positions.copy()

    def predict(self, pose, intrinsics) -> np.ndarray:
        """Depth image of the surfel map from ``pose``."""
        return render_surfels(self.scene_, pose, intrinsics).depth
