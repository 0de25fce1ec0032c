"""Submaps linked by relative-pose constraints, and a pipeline that maintains them.

Each submap is an independent voxel map with its own local frame; its pose
maps local coordinates to the global frame. The scene is rendered by
blending all submaps at every ray sample, so no merged map is ever built.

Graph text format (one record per line)::

    hashfusion-graph 1
    submap <id> <active|passive> <primary 0|1> <12 floats, 3x4 row-major>
    constraint <from> <to> <weight> <12 floats, 3x4 row-major>
"""
from __future__ import annotations

import enum
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial.transform import Rotation

from .core import Pose, RgbdCalib, View, build_view
from .engine import FrameLog, Settings, make_relocaliser, track_view
from .fusion import allocate_from_depth, integrate_frame, update_visible_list
from .raycast import RenderState, ranges_from_corners, render_maps
from .reloc import prepare_image
from .tracking import Quality, evaluate_tracking_quality, track_extended
from .voxelmap import VoxelBlockMap, block_corners, block_visibility

GRAPH_HEADER = "hashfusion-graph 1"


class SubmapState(enum.Enum):
    ACTIVE = "active"
    PASSIVE = "passive"


@dataclass
class Submap:
    id: int
    map: VoxelBlockMap
    pose: Pose = field(default_factory=Pose)          # local -> global
    state: SubmapState = SubmapState.ACTIVE
    is_primary: bool = False
    camera_pose: Pose | None = None                    # local -> camera, while active
    render_state: RenderState | None = None
    quality: Quality = Quality.GOOD
    central_fraction: float | None = None             # at the last spawn check


@dataclass
class PoseConstraint:
    """``measured`` maps ``from``-local to ``to``-local coordinates."""

    from_id: int
    to_id: int
    measured: Pose
    weight: int = 1


class SubmapGraph:
    def __init__(self):
        self.submaps: dict[int, Submap] = {}
        self.constraints: dict[tuple[int, int], PoseConstraint] = {}
        self.status = "idle"
        self.residual_history: list[float] = []

    @property
    def primary(self) -> Submap | None:
        for s in self.submaps.values():
            if s.is_primary:
                return s
        return None

    @property
    def active(self) -> list[Submap]:
        return [s for s in self.submaps.values() if s.state == SubmapState.ACTIVE]

    def add_submap(self, vmap: VoxelBlockMap, pose: Pose | None = None, primary: bool = True) -> Submap:
        sid = max(self.submaps, default=-1) + 1
        sub = Submap(sid, vmap, pose if pose is not None else Pose())
        self.submaps[sid] = sub
        if primary:
            self.set_primary(sid)
        return sub

    def set_primary(self, sid: int | None):
        for s in self.submaps.values():
            s.is_primary = s.id == sid
        if sid is not None:
            self.submaps[sid].state = SubmapState.ACTIVE

    def deactivate(self, sid: int):
        sub = self.submaps[sid]
        sub.state = SubmapState.PASSIVE
        sub.is_primary = False
        sub.render_state = None

    # -- persistence -------------------------------------------------------
    def save(self, path):
        def mat(p: Pose) -> str:
            return " ".join(repr(float(x)) for x in p.matrix[:3].ravel())

        lines = [GRAPH_HEADER]
        for s in sorted(self.submaps.values(), key=lambda s: s.id):
            lines.append(f"submap {s.id} {s.state.value} {int(s.is_primary)} {mat(s.pose)}")
        for (a, b), c in sorted(self.constraints.items()):
            lines.append(f"constraint {a} {b} {c.weight} {mat(c.measured)}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path, voxel_size: float = 0.005, **map_kwargs) -> SubmapGraph:
        """Restore ids, states, poses and constraints; submap maps come back empty."""
        g = cls()
        with open(path) as fh:
            lines = [ln.split() for ln in fh if ln.strip()]
        if not lines or " ".join(lines[0]) != GRAPH_HEADER:
            raise ValueError(f"{path}: not a submap graph file")
        for n, tok in enumerate(lines[1:], start=2):
            try:
                vals = np.array(tok[-12:], dtype=float).reshape(3, 4)
                pose = Pose(vals[:, :3], vals[:, 3])
                if tok[0] == "submap":
                    sid = int(tok[1])
                    g.submaps[sid] = Submap(sid, VoxelBlockMap(voxel_size, **map_kwargs), pose,
                                            SubmapState(tok[2]), tok[3] == "1")
                elif tok[0] == "constraint":
                    a, b = int(tok[1]), int(tok[2])
                    g.constraints[(a, b)] = PoseConstraint(a, b, pose, int(tok[3]))
                else:
                    raise ValueError(f"unknown record {tok[0]!r}")
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{n}: {exc}") from exc
        for a, b in g.constraints:
            if a not in g.submaps or b not in g.submaps:
                raise ValueError(f"{path}: constraint {a}->{b} names a missing submap")
        return g


# -- constraints -----------------------------------------------------------
def add_constraint(graph: SubmapGraph, from_id: int, to_id: int, relative: Pose) -> PoseConstraint:
    """Accumulate one observation of ``to``-from-``from``; passive submaps involved become active.

    A repeat observation of an existing pair (in either direction) merges
    into it: weighted rotation mean and arithmetic mean translation.
    """
    if from_id == to_id:
        raise ValueError("a submap cannot be constrained to itself")
    for sid in (from_id, to_id):
        if sid not in graph.submaps:
            raise KeyError(f"no submap {sid}")
    if (to_id, from_id) in graph.constraints and (from_id, to_id) not in graph.constraints:
        from_id, to_id, relative = to_id, from_id, relative.inverse()
    c = graph.constraints.get((from_id, to_id))
    if c is None:
        c = PoseConstraint(from_id, to_id, relative, 1)
        graph.constraints[(from_id, to_id)] = c
    else:
        rots = Rotation.from_matrix(np.stack([c.measured.rotation, relative.rotation]))
        R = rots.mean(weights=[c.weight, 1.0]).as_matrix()
        t = (c.weight * c.measured.translation + relative.translation) / (c.weight + 1)
        c.measured = Pose(R, t)
        c.weight += 1
    for sid in (from_id, to_id):
        graph.submaps[sid].state = SubmapState.ACTIVE
    return c


# -- optimisation ----------------------------------------------------------
def constraint_error(p_from: Pose, p_to: Pose, measured: Pose) -> np.ndarray:
    return (p_to.inverse() @ p_from @ measured.inverse()).log()


def _robust(s2: np.ndarray, delta: float):
    """Huber on the error norm: cost and reweighting factor from squared norms."""
    s = np.sqrt(s2)
    cost = np.where(s <= delta, s2, 2 * delta * s - delta * delta)
    w = np.where(s <= delta, 1.0, delta / np.maximum(s, 1e-300))
    return cost, w


def _graph_cost(poses, cons, delta):
    e = np.array([constraint_error(poses[c.from_id], poses[c.to_id], c.measured) for c in cons])
    cost, w = _robust(np.sum(e * e, axis=1), delta)
    weights = np.array([c.weight for c in cons], dtype=float)
    return float(np.sum(weights * cost)), e, w * weights


def optimise_poses(poses: dict[int, Pose], constraints: list[PoseConstraint], max_iter: int = 50,
                   huber: float = 0.1, tol: float = 1e-12):
    """Robust Gauss-Newton (with Levenberg damping) on submap poses.

    Each connected component keeps its lowest id fixed. Returns the new
    poses and the cost after every accepted step (first entry: initial cost).
    """
    poses = dict(poses)
    cons = [c for c in constraints if c.from_id in poses and c.to_id in poses]
    if not cons:
        return poses, [0.0]
    ids = sorted(poses)
    pos = {sid: k for k, sid in enumerate(ids)}
    rows = [pos[c.from_id] for c in cons]
    cols = [pos[c.to_id] for c in cons]
    adj = coo_matrix((np.ones(len(cons)), (rows, cols)), shape=(len(ids), len(ids)))
    _, label = connected_components(adj, directed=False)
    gauge = {min(sid for sid in ids if label[pos[sid]] == lab) for lab in set(label)}
    free = [sid for sid in ids if sid not in gauge]
    if not free:
        return poses, [_graph_cost(poses, cons, huber)[0]]
    col = {sid: 6 * k for k, sid in enumerate(free)}

    cost, e, w = _graph_cost(poses, cons, huber)
    history = [cost]
    lam = 1e-6
    eps = 1e-7
    for _ in range(max_iter):
        H = np.zeros((6 * len(free), 6 * len(free)))
        g = np.zeros(6 * len(free))
        for ci, c in enumerate(cons):
            blocks = {}
            for sid in (c.from_id, c.to_id):
                if sid not in col:
                    continue
                J = np.zeros((6, 6))
                for k in range(6):
                    d = np.zeros(6)
                    d[k] = eps
                    plus, minus = dict(poses), dict(poses)
                    plus[sid] = Pose.exp(d) @ poses[sid]
                    minus[sid] = Pose.exp(-d) @ poses[sid]
                    J[:, k] = (constraint_error(plus[c.from_id], plus[c.to_id], c.measured)
                               - constraint_error(minus[c.from_id], minus[c.to_id], c.measured)) / (2 * eps)
                blocks[sid] = J
            for a, Ja in blocks.items():
                g[col[a]:col[a] + 6] += w[ci] * Ja.T @ e[ci]
                for b, Jb in blocks.items():
                    H[col[a]:col[a] + 6, col[b]:col[b] + 6] += w[ci] * Ja.T @ Jb
        improved = False
        while lam < 1e8:
            A = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
            try:
                step = np.linalg.solve(A, -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            trial = dict(poses)
            for sid in free:
                trial[sid] = Pose.exp(step[col[sid]:col[sid] + 6]) @ poses[sid]
            t_cost, t_e, t_w = _graph_cost(trial, cons, huber)
            if t_cost <= cost:
                poses, cost, e, w = trial, t_cost, t_e, t_w
                history.append(cost)
                lam = max(lam / 10, 1e-12)
                improved = True
                break
            lam *= 10
        if not improved or np.linalg.norm(step) < tol:
            break
    return poses, history


def optimise_graph(graph: SubmapGraph, max_iter: int = 50, huber: float = 0.1) -> float:
    """Optimise and apply submap poses; returns the final cost."""
    if not graph.constraints:
        return 0.0
    graph.status = "running"
    poses, history = optimise_poses({s.id: s.pose for s in graph.submaps.values()},
                                    list(graph.constraints.values()), max_iter, huber)
    apply_poses(graph, poses, history)
    return history[-1]


def apply_poses(graph: SubmapGraph, poses: dict[int, Pose], history: list[float]):
    for sid, p in poses.items():
        if sid in graph.submaps:
            graph.submaps[sid].pose = p
    graph.residual_history = list(history)
    graph.status = "applied"


# -- spawning --------------------------------------------------------------
def central_fraction(vmap: VoxelBlockMap, entries, radius: float = 2.0) -> float:
    """Fraction of ``entries`` whose block centre lies within ``radius`` of the local origin."""
    entries = np.asarray(entries, dtype=np.int64)
    if entries.size == 0:
        return 1.0
    centres = block_corners(vmap, entries).mean(axis=1)
    return float(np.mean(np.linalg.norm(centres, axis=1) <= radius))


def maybe_spawn_submap(graph: SubmapGraph, camera_pose: Pose, visible_entries, radius: float = 2.0,
                       threshold: float = 0.5, map_factory=None) -> int | None:
    """Start a new primary submap at the camera once the primary's view drifts off its centre.

    Spawning happens on the frame where the central fraction falls from at
    least ``threshold`` to below it.
    """
    primary = graph.primary
    if primary is None:
        raise ValueError("graph has no primary submap")
    frac = central_fraction(primary.map, visible_entries, radius)
    prev, primary.central_fraction = primary.central_fraction, frac
    if prev is None or prev < threshold or frac >= threshold:
        return None
    vmap = map_factory() if map_factory else VoxelBlockMap(primary.map.voxel_size)
    sub = graph.add_submap(vmap, primary.pose @ camera_pose.inverse(), primary=True)
    sub.camera_pose = Pose()
    return sub.id


# -- combined rendering ----------------------------------------------------
class CombinedField:
    """Weight-blended sdf over several submaps, in global voxel coordinates.

    Where only one submap contributes, its own values are returned unchanged.
    """

    def __init__(self, maps: list[VoxelBlockMap], poses: list[Pose]):
        if not maps:
            raise ValueError("no submaps to combine")
        sizes = {m.voxel_size for m in maps}
        if len(sizes) != 1:
            raise ValueError("submaps must share a voxel size")
        self.voxel_size = sizes.pop()
        self.fields = [m.index() for m in maps]
        self.to_local = []
        for p in poses:
            inv = p.inverse()
            ident = np.array_equal(inv.rotation, np.eye(3)) and not inv.translation.any()
            self.to_local.append(None if ident else (inv.rotation, inv.translation / self.voxel_size))

    def _local(self, k, p):
        tf = self.to_local[k]
        return p if tf is None else p @ tf[0].T + tf[1]

    def probe(self, points):
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        sdfs, allocs, weights = [], [], []
        for k, f in enumerate(self.fields):
            q = self._local(k, p)
            s, a = f.probe(q)
            _, valid, w = f.sample(q, with_weight=True)
            sdfs.append(s)
            allocs.append(a)
            weights.append(np.where(valid & a, w, 0.0))
        return self._blend(np.array(sdfs), np.array(allocs), np.array(weights))

    @staticmethod
    def _blend(vals, present, weights):
        n = present.sum(axis=0)
        out = np.ones(vals.shape[1:])
        one = n == 1
        if one.any():
            out[one] = vals[np.argmax(present, axis=0)[one], np.flatnonzero(one)]
        many = n > 1
        if many.any():
            w = np.where(present, weights, 0.0)[:, many]
            tot = w.sum(axis=0)
            eq = present[:, many].astype(float)
            use = np.where(tot > 0, w, eq)
            den = use.sum(axis=0)
            if vals.ndim == 3:
                out[many] = (use[..., None] * vals[:, many]).sum(axis=0) / den[:, None]
            else:
                out[many] = (use * vals[:, many]).sum(axis=0) / den
        return out, n > 0

    def sample(self, points, with_weight: bool = False, with_colour: bool = False):
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        sdfs, valids, weights, colours = [], [], [], []
        for k, f in enumerate(self.fields):
            res = f.sample(self._local(k, p), with_weight=True, with_colour=with_colour)
            sdfs.append(res[0])
            valids.append(res[1])
            weights.append(res[2])
            if with_colour:
                colours.append(res[3])
        valids = np.array(valids)
        weights = np.where(valids, np.array(weights), 0.0)
        sdf, valid = self._blend(np.array(sdfs), valids, weights)
        out = [sdf, valid]
        if with_weight:
            out.append(weights.sum(axis=0))
        if with_colour:
            out.append(self._blend(np.array(colours), valids, weights)[0] * valid[:, None])
        return tuple(out)


def submap_visible_entries(vmap: VoxelBlockMap, camera_pose: Pose, intrinsics, zmin: float, zmax: float):
    cand = vmap.allocated_entries(min_ptr=0)
    return cand[block_visibility(vmap, cand, camera_pose, intrinsics, zmin, zmax)]


def render_combined(graph: SubmapGraph, pose: Pose, intrinsics, *, mu: float = 0.02, zmin: float = 0.2,
                    zmax: float = 3.0, mode: str = "icp_maps", submap_ids=None, entries=None) -> RenderState:
    """Raycast the blend of submaps from a global world-to-camera ``pose``.

    ``entries`` optionally maps submap id to the blocks used for the
    expected depth ranges; by default each submap's blocks in view are used.
    """
    ids = sorted(graph.submaps) if submap_ids is None else list(submap_ids)
    if not ids:
        state = RenderState(intrinsics)
        H, W = intrinsics.shape
        state.pose = pose
        state.points = np.full((H, W, 3), np.nan)
        state.normals = np.full((H, W, 3), np.nan)
        state.depth = np.full((H, W), -1.0)
        state.hit = np.zeros((H, W), dtype=bool)
        return state
    subs = [graph.submaps[i] for i in ids]
    corners = []
    for s in subs:
        if entries is not None and s.id in entries:
            ent = np.asarray(entries[s.id], dtype=np.int64)
        else:
            ent = submap_visible_entries(s.map, pose @ s.pose, intrinsics, zmin, zmax)
        c = block_corners(s.map, ent)
        corners.append(s.pose.apply(c) if c.size else c.reshape(0, 8, 3))
    rng = ranges_from_corners(np.concatenate(corners), pose, intrinsics, zmin, zmax)
    fld = CombinedField([s.map for s in subs], [s.pose for s in subs])
    return render_maps(fld, pose, intrinsics, mu=mu, mode=mode, expected_range=rng)


# -- pipeline --------------------------------------------------------------
@dataclass
class MultiFrameLog(FrameLog):
    primary: int | None = None
    active: tuple = ()
    spawned: int | None = None
    loop_closures: list = field(default_factory=list)
    optimised: bool = False


class MultiEngine:
    """Per-frame tracking against every active submap, fusion into the primary only.

    Graph optimisation runs on a snapshot of the constraints in a worker
    thread and its poses are applied at the start of the next frame.
    """

    def __init__(self, calib: RgbdCalib, settings: Settings | None = None, *, spawn_radius: float = 2.0,
                 spawn_threshold: float = 0.5, optimise_every: int = 20, background: bool = True):
        self.calib = calib
        self.settings = settings or Settings(lib_mode="loopclosure")
        self.spawn_radius = spawn_radius
        self.spawn_threshold = spawn_threshold
        self.optimise_every = optimise_every
        self.graph = SubmapGraph()
        self.graph.add_submap(self._new_map(), Pose(), primary=True)
        self.reloc = make_relocaliser(self.settings)
        self.keyframe_submap: list[int] = []
        self.last_primary: int | None = 0
        self.prev_view: View | None = None
        self.frame = 0
        self.logs: list[MultiFrameLog] = []
        self._executor = ThreadPoolExecutor(max_workers=1) if background else None
        self._pending: Future | None = None

    def _new_map(self) -> VoxelBlockMap:
        s = self.settings
        return VoxelBlockMap(s.scene.voxel_size, s.bucket_count, s.excess_count, s.block_capacity)

    @property
    def render_mode(self) -> str:
        return "color" if self.settings.tracker.kind == "rgb" else "icp_maps"

    def _render(self, sub: Submap, camera_pose: Pose) -> RenderState:
        s = self.settings
        intr = self.calib.intrinsics_d
        rng = ranges_from_corners(block_corners(sub.map, sub.map.visible_entries), camera_pose, intr,
                                  s.scene.view_frustum_min, s.scene.view_frustum_max)
        return render_maps(sub.map, camera_pose, intr, mu=s.scene.mu, mode=self.render_mode, expected_range=rng)

    def _verify(self, sub: Submap, view: View, guess: Pose):
        update_visible_list(sub.map, guess, self.calib.intrinsics_d, self.settings.scene)
        maps = self._render(sub, guess)
        pose, summary = track_extended(view, maps, guess)
        return pose, evaluate_tracking_quality(summary, self.settings.classifier)

    def _schedule_optimisation(self):
        cons = [PoseConstraint(c.from_id, c.to_id, c.measured, c.weight) for c in self.graph.constraints.values()]
        poses = {s.id: s.pose for s in self.graph.submaps.values()}
        self.graph.status = "running"
        if self._executor is None:
            apply_poses(self.graph, *optimise_poses(poses, cons))
        else:
            self._pending = self._executor.submit(optimise_poses, poses, cons)

    def _apply_pending(self):
        if self._pending is not None:
            apply_poses(self.graph, *self._pending.result())
            self._pending = None

    def close(self):
        self._apply_pending()
        if self._executor is not None:
            self._executor.shutdown()

    def global_pose(self) -> Pose | None:
        """World-to-camera pose in the global frame, from the primary submap."""
        p = self.graph.primary
        if p is None or p.camera_pose is None:
            return None
        return p.camera_pose @ p.pose.inverse()

    def process_frame(self, depth_raw: np.ndarray, rgb: np.ndarray | None = None,
                      pose_hint: Pose | None = None) -> MultiFrameLog:
        s = self.settings
        self._apply_pending()
        g = self.graph
        view = build_view(depth_raw, rgb, self.calib, bilateral=s.use_bilateral_filter,
                          levels=s.tracker.options.levels)
        log = MultiFrameLog(self.frame, Pose(), Quality.GOOD)

        if self.frame == 0:
            prim = g.primary
            prim.camera_pose = pose_hint @ prim.pose if pose_hint is not None else Pose()
            prim.quality = Quality.GOOD
        else:
            log.stages.append("tracking")
            for sub in g.active:
                if s.tracker.kind == "fixed":
                    if pose_hint is None:
                        raise ValueError("the fixed tracker needs a pose for every frame")
                    sub.camera_pose, sub.quality = pose_hint @ sub.pose, Quality.GOOD
                    continue
                if sub.render_state is None:
                    sub.quality = Quality.FAILED
                    continue
                init = pose_hint @ sub.pose if (s.seed_tracker_with_hint and pose_hint is not None) \
                    else sub.camera_pose
                prev = sub.camera_pose
                sub.camera_pose, sub.quality, _ = track_view(s, view, sub.render_state, init, self.prev_view, prev)
                if sub.quality == Quality.FAILED:
                    sub.camera_pose = prev
            prim = g.primary
            if prim is None or prim.quality == Quality.FAILED:
                good = [sub for sub in g.active if sub.quality != Quality.FAILED]
                if good:
                    g.set_primary(min(good, key=lambda x: (x.quality != Quality.GOOD, x.id)).id)
                else:
                    recovered = False
                    if s.on_failure == "relocalise" and self.reloc.db.entry_count:
                        log.stages.append("relocalisation")
                        recovered = self._relocalise(view, log)
                    if not recovered and prim is None and self.last_primary is not None:
                        self._retry_last(view)
            for sub in list(g.active):
                if sub.quality == Quality.FAILED and not (sub.is_primary and s.on_failure == "ignore"):
                    g.deactivate(sub.id)

        prim = g.primary
        integrate = prim is not None and (prim.quality != Quality.FAILED or s.on_failure == "ignore")
        if integrate:
            log.stages.append("allocation")
            allocate_from_depth(prim.map, view, prim.camera_pose, s.scene)
            log.stages.append("integration")
            integrate_frame(prim.map, view, prim.camera_pose, s.scene)
            log.integrated = True

        if prim is not None and prim.quality != Quality.FAILED:
            for sub in g.active:
                if sub is not prim and sub.quality == Quality.GOOD and prim.quality == Quality.GOOD:
                    add_constraint(g, prim.id, sub.id, sub.camera_pose.inverse() @ prim.camera_pose)
            image = prepare_image(view.depth_m, view.rgb)
            closed = self._close_loops(view, image, prim, log)
            if prim.quality == Quality.GOOD and integrate:
                if self.reloc.process_frame(image, prim.camera_pose, "train").added:
                    self.keyframe_submap.append(prim.id)
            spawned = None
            if integrate:
                spawned = maybe_spawn_submap(g, prim.camera_pose, prim.map.visible_entries, self.spawn_radius,
                                             self.spawn_threshold, self._new_map)
            if spawned is not None:
                new = g.submaps[spawned]
                new.quality = prim.quality
                allocate_from_depth(new.map, view, new.camera_pose, s.scene)
                integrate_frame(new.map, view, new.camera_pose, s.scene)
                log.spawned = spawned
            if closed or (self.frame > 0 and self.frame % self.optimise_every == 0 and g.constraints):
                self._schedule_optimisation()
                log.optimised = True

        log.stages.append("raycast")
        for sub in g.active:
            if sub.camera_pose is None:
                continue
            if not (sub.is_primary and integrate):
                update_visible_list(sub.map, sub.camera_pose, self.calib.intrinsics_d, s.scene)
            sub.render_state = self._render(sub, sub.camera_pose)

        prim = g.primary
        if prim is not None:
            self.last_primary = prim.id
        log.primary = prim.id if prim else None
        log.active = tuple(sub.id for sub in g.active)
        log.quality = prim.quality if prim else Quality.FAILED
        log.pose = self.global_pose() or (self.logs[-1].pose if self.logs else Pose())
        log.allocated_blocks = sum(sub.map.n_allocated_blocks for sub in g.submaps.values())
        if prim is not None and prim.quality != Quality.FAILED:
            self.prev_view = view
        self.logs.append(log)
        self.frame += 1
        return log

    def _relocalise(self, view: View, log: MultiFrameLog):
        image = prepare_image(view.depth_m, view.rgb)
        for cand in self.reloc.process_frame(image, mode="relocalise").candidates:
            sub = self.graph.submaps[self.keyframe_submap[cand.keyframe]]
            pose, quality = self._verify(sub, view, cand.pose)
            if quality == Quality.GOOD:
                sub.camera_pose, sub.quality = pose, quality
                self.graph.set_primary(sub.id)
                log.relocalised = True
                return True
        return False

    def _retry_last(self, view: View):
        sub = self.graph.submaps[self.last_primary]
        if sub.camera_pose is None:
            return
        pose, quality = self._verify(sub, view, sub.camera_pose)
        if quality != Quality.FAILED:
            sub.camera_pose, sub.quality = pose, quality
            self.graph.set_primary(sub.id)

    def _close_loops(self, view: View, image, prim: Submap, log: MultiFrameLog) -> bool:
        if prim.quality != Quality.GOOD:
            return False
        closed = False
        tried = set()
        for cand in self.reloc.process_frame(image, mode="relocalise").candidates:
            sid = self.keyframe_submap[cand.keyframe]
            sub = self.graph.submaps[sid]
            if sub.state == SubmapState.ACTIVE or sid in tried:
                continue
            tried.add(sid)
            pose, quality = self._verify(sub, view, cand.pose)
            if quality == Quality.GOOD:
                add_constraint(self.graph, prim.id, sid, pose.inverse() @ prim.camera_pose)
                sub.camera_pose, sub.quality = pose, quality
                log.loop_closures.append(sid)
                closed = True
        return closed

    def summary(self) -> dict:
        logs = self.logs
        return {
            "frames": len(logs),
            "tracked_good": sum(lg.quality == Quality.GOOD for lg in logs),
            "tracked_poor": sum(lg.quality == Quality.POOR for lg in logs),
            "tracked_failed": sum(lg.quality == Quality.FAILED for lg in logs),
            "relocalisations": sum(lg.relocalised for lg in logs),
            "submaps": len(self.graph.submaps),
            "constraints": len(self.graph.constraints),
            "loop_closures": sum(len(lg.loop_closures) for lg in logs),
            "blocks_allocated": sum(sub.map.n_allocated_blocks for sub in self.graph.submaps.values()),
            "keyframes": self.reloc.db.entry_count,
        }

    def mesh(self):
        """Meshes of every submap, in global coordinates."""
        from .voxelmap import Mesh
        verts, faces, off = [], [], 0
        for sub in sorted(self.graph.submaps.values(), key=lambda x: x.id):
            m = sub.map.extract_mesh()
            if len(m.vertices):
                verts.append(sub.pose.apply(m.vertices))
                faces.append(m.faces + off)
                off += len(m.vertices)
        if not verts:
            return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        return Mesh(np.concatenate(verts), np.concatenate(faces))


def run_multi_pipeline(engine: MultiEngine, frames, poses=None) -> list[MultiFrameLog]:
    poses = list(poses) if poses is not None else None
    for i, fr in enumerate(frames):
        depth, rgb = fr if isinstance(fr, tuple) else (fr, None)
        engine.process_frame(depth, rgb, poses[i] if poses is not None else None)
    engine.close()
    return engine.logs
