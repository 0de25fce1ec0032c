"""Frame-by-frame dense reconstruction pipeline over a single voxel map."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator

from .core import Pose, RgbdCalib, View, build_view
from .fusion import SceneParams, allocate_from_depth, integrate_frame, update_visible_list
from .raycast import RenderState, render_expected_ranges, render_maps
from .reloc import FernConservatory, Relocaliser, prepare_image
from .swapping import GlobalCache, materialise, swap_in, swap_out, update_visibility_age
from .tracking import (EXTENDED_OPTIONS, QualityClassifier, Quality, TrackerOptions, evaluate_tracking_quality,
                       track_color, track_depth, track_extended)
from .voxelmap import VoxelBlockMap


@dataclass(frozen=True)
class TrackerConfig:
    """Tracker selection: ``kind`` is ``icp``, ``rgb``, ``extended`` or ``fixed`` (poses supplied per frame)."""

    kind: str = "extended"
    options: TrackerOptions = EXTENDED_OPTIONS
    skip_points: bool = False


@dataclass
class Settings:
    lib_mode: str = "basic"              # basic | loopclosure
    map_kind: str = "voxel"              # voxel | surfel
    swapping: str = "disabled"           # disabled | enabled | delete
    on_failure: str = "relocalise"       # relocalise | ignore | stop
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    scene: SceneParams = field(default_factory=SceneParams)
    use_approximate_raycast: bool = False
    use_bilateral_filter: bool = False
    create_meshing_engine: bool = True
    # trackers start from the supplied per-frame pose instead of the previous estimate
    seed_tracker_with_hint: bool = False
    swap_capacity: int = 512
    swap_margin: float = 8.0
    bucket_count: int = 2 ** 20
    excess_count: int = 2 ** 17
    block_capacity: int = 2 ** 18
    n_ferns: int = 500
    fern_tests: int = 4
    harvest_threshold: float = 0.2
    reloc_candidates: int = 4
    classifier: QualityClassifier = field(default_factory=QualityClassifier)
    seed: int = 0
    surfel: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, allowed in (("lib_mode", ("basic", "loopclosure")), ("map_kind", ("voxel", "surfel")),
                              ("swapping", ("disabled", "enabled", "delete")),
                              ("on_failure", ("relocalise", "ignore", "stop"))):
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {', '.join(allowed)}; got {getattr(self, name)!r}")
        if self.lib_mode == "loopclosure" and self.map_kind != "voxel":
            raise ValueError("loop closure needs the voxel map")


@dataclass
class FrameLog:
    index: int
    pose: Pose
    quality: Quality
    stages: list = field(default_factory=list)
    relocalised: bool = False
    integrated: bool = False
    swapped_in: int = 0
    swapped_out: int = 0
    allocated_blocks: int = 0


def make_relocaliser(settings: Settings) -> Relocaliser:
    ferns = FernConservatory.generate(settings.n_ferns, settings.fern_tests, seed=settings.seed)
    return Relocaliser(ferns, settings.harvest_threshold, settings.reloc_candidates)


def track_view(settings: Settings, view: View, maps: RenderState, init: Pose, prev_view=None, prev_pose=None):
    """Run the configured tracker; returns ``(pose, quality, summary)``."""
    cfg = settings.tracker
    if cfg.kind == "icp":
        pose, summary = track_depth(view, maps, init, cfg.options)
    elif cfg.kind == "extended":
        pose, summary = track_extended(view, maps, init, cfg.options, prev_view, prev_pose)
    elif cfg.kind == "rgb":
        pose, summary = track_color(view, maps, init, cfg.options.levels, cfg.options.iterations,
                                    skip_points=cfg.skip_points)
    else:
        raise ValueError(f"unknown tracker {cfg.kind!r}")
    return pose, evaluate_tracking_quality(summary, settings.classifier), summary


class VoxelEngine:
    """Tracking, allocation, swap-in, integration, raycast and swap-out for each frame."""

    def __init__(self, calib: RgbdCalib, settings: Settings | None = None):
        self.calib = calib
        self.settings = settings or Settings()
        s = self.settings
        self.map = VoxelBlockMap(s.scene.voxel_size, s.bucket_count, s.excess_count, s.block_capacity)
        self.cache = None
        if s.swapping != "disabled":
            self.cache = GlobalCache.for_map(self.map, capacity=s.swap_capacity,
                                             mode="enabled" if s.swapping == "enabled" else "delete",
                                             max_w=s.scene.max_w)
        self.reloc = make_relocaliser(s)
        self.render_state: RenderState | None = None
        self.pose = Pose()
        self.prev_view: View | None = None
        self.frame = 0
        self.logs: list[FrameLog] = []

    @property
    def render_mode(self) -> str:
        return "color" if self.settings.tracker.kind == "rgb" else "icp_maps"

    def _render(self, pose: Pose) -> RenderState:
        s = self.settings
        rng = render_expected_ranges(self.map, pose, self.calib.intrinsics_d, None,
                                     s.scene.view_frustum_min, s.scene.view_frustum_max)
        state = self.render_state if s.use_approximate_raycast else None
        return render_maps(self.map, pose, self.calib.intrinsics_d, state, mu=s.scene.mu, mode=self.render_mode,
                           expected_range=rng, approximate=s.use_approximate_raycast)

    def _relocalise(self, view: View):
        image = prepare_image(view.depth_m, view.rgb)
        for cand in self.reloc.process_frame(image, mode="relocalise").candidates:
            update_visible_list(self.map, cand.pose, self.calib.intrinsics_d, self.settings.scene)
            maps = self._render(cand.pose)
            pose, summary = track_extended(view, maps, cand.pose)
            quality = evaluate_tracking_quality(summary, self.settings.classifier)
            if quality == Quality.GOOD:
                return pose, quality
        return self.pose, Quality.FAILED

    def process_frame(self, depth_raw: np.ndarray, rgb: np.ndarray | None = None,
                      pose_hint: Pose | None = None) -> FrameLog:
        s = self.settings
        view = build_view(depth_raw, rgb, self.calib, bilateral=s.use_bilateral_filter,
                          levels=s.tracker.options.levels)
        log = FrameLog(self.frame, self.pose, Quality.GOOD)
        if s.tracker.kind == "fixed":
            if pose_hint is None:
                raise ValueError("the fixed tracker needs a pose for every frame")
            pose, quality = pose_hint, Quality.GOOD
            if self.frame > 0:
                log.stages.append("tracking")
        elif self.frame == 0 or self.render_state is None:
            pose, quality = (pose_hint if pose_hint is not None else self.pose), Quality.GOOD
        else:
            log.stages.append("tracking")
            init = pose_hint if (s.seed_tracker_with_hint and pose_hint is not None) else self.pose
            pose, quality, _ = track_view(s, view, self.render_state, init, self.prev_view, self.pose)
            if quality == Quality.FAILED and s.on_failure == "relocalise" and self.reloc.db.entry_count:
                log.stages.append("relocalisation")
                pose, quality = self._relocalise(view)
                log.relocalised = quality != Quality.FAILED
        log.pose, log.quality = pose, quality

        integrate = quality != Quality.FAILED or s.on_failure == "ignore"
        if integrate:
            log.stages.append("allocation")
            margin = s.swap_margin if self.cache is not None else None
            allocate_from_depth(self.map, view, pose, s.scene, swap_margin=margin)
            if self.cache is not None:
                log.stages.append("swap_in")
                log.swapped_in = swap_in(self.map, self.cache)
            log.stages.append("integration")
            integrate_frame(self.map, view, pose, s.scene)
            log.integrated = True
        else:
            update_visible_list(self.map, pose, self.calib.intrinsics_d, s.scene)
        log.stages.append("raycast")
        self.render_state = self._render(pose)
        if self.cache is not None:
            log.stages.append("swap_out")
            update_visibility_age(self.map, self.cache)
            log.swapped_out = swap_out(self.map, self.cache)

        if quality == Quality.GOOD and integrate:
            self.reloc.process_frame(prepare_image(view.depth_m, view.rgb), pose, "train")
        if quality != Quality.FAILED:
            self.pose = pose
            self.prev_view = view
        log.allocated_blocks = self.map.n_allocated_blocks
        self.logs.append(log)
        self.frame += 1
        return log

    def mesh(self):
        if self.cache is None:
            return self.map.extract_mesh()
        # blocks evicted to the host still belong to the model
        return materialise(self.map, self.cache).extract_mesh()

    def summary(self) -> dict:
        logs = self.logs
        return {
            "frames": len(logs),
            "tracked_good": sum(lg.quality == Quality.GOOD for lg in logs),
            "tracked_poor": sum(lg.quality == Quality.POOR for lg in logs),
            "tracked_failed": sum(lg.quality == Quality.FAILED for lg in logs),
            "relocalisations": sum(lg.relocalised for lg in logs),
            "blocks_allocated": self.map.n_allocated_blocks,
            "swap_in_total": sum(lg.swapped_in for lg in logs),
            "swap_out_total": sum(lg.swapped_out for lg in logs),
            "swap_in_max_per_frame": max((lg.swapped_in for lg in logs), default=0),
            "swap_out_max_per_frame": max((lg.swapped_out for lg in logs), default=0),
            "keyframes": self.reloc.db.entry_count,
        }


class ReconstructionPipeline(BaseEstimator):
    """Estimator view of :class:`VoxelEngine`: ``fit`` consumes ``(depth, rgb)`` frames, ``predict`` gives poses."""

    def __init__(self, calib=None, settings=None):
        self.calib = calib
        self.settings = settings

    def fit(self, frames, poses=None):
        if self.calib is None:
            raise ValueError("calib is required")
        self.engine_ = VoxelEngine(self.calib, self.settings or Settings())
        poses = list(poses) if poses is not None else None
        for i, fr in enumerate(frames):
            depth, rgb = fr if isinstance(fr, tuple) else (fr, None)
            self.engine_.process_frame(depth, rgb, poses[i] if poses is not None else None)
        return self

    def predict(self, X=None) -> list[Pose]:
        return [lg.pose for lg in self.engine_.logs]

    def transform(self, X=None):
        return self.engine_.mesh()


def with_tracker(settings: Settings, **kwargs) -> Settings:
    return replace(settings, tracker=replace(settings.tracker, **kwargs))


class SurfelEngine:
    """The same frame loop over a surfel map: tracking, integration, cleanup, render."""

    def __init__(self, calib: RgbdCalib, settings: Settings | None = None):
        from .surfel import SurfelParams, SurfelScene
        self.calib = calib
        self.settings = settings or Settings(map_kind="surfel")
        self.params = SurfelParams(**self.settings.surfel)
        self.scene = SurfelScene(self.params.capacity)
        self.render_state: RenderState | None = None
        self.pose = Pose()
        self.prev_view: View | None = None
        self.frame = 0
        self.logs: list[FrameLog] = []

    def process_frame(self, depth_raw: np.ndarray, rgb: np.ndarray | None = None,
                      pose_hint: Pose | None = None) -> FrameLog:
        from .surfel import fuse_frame, remove_and_merge, render_surfels
        s = self.settings
        view = build_view(depth_raw, rgb, self.calib, bilateral=s.use_bilateral_filter,
                          levels=s.tracker.options.levels)
        log = FrameLog(self.frame, self.pose, Quality.GOOD)
        if s.tracker.kind == "fixed":
            if pose_hint is None:
                raise ValueError("the fixed tracker needs a pose for every frame")
            pose, quality = pose_hint, Quality.GOOD
            if self.frame > 0:
                log.stages.append("tracking")
        elif self.frame == 0 or self.render_state is None:
            pose, quality = (pose_hint if pose_hint is not None else self.pose), Quality.GOOD
        else:
            log.stages.append("tracking")
            init = pose_hint if (s.seed_tracker_with_hint and pose_hint is not None) else self.pose
            pose, quality, _ = track_view(s, view, self.render_state, init, self.prev_view, self.pose)
        log.pose, log.quality = pose, quality
        if quality != Quality.FAILED or s.on_failure == "ignore":
            log.stages.append("integration")
            fuse_frame(self.scene, view, pose, self.frame, self.params)
            remove_and_merge(self.scene, self.frame, self.params, pose, view.intrinsics)
            log.integrated = True
        log.stages.append("raycast")
        self.render_state = render_surfels(self.scene, pose, self.calib.intrinsics_d)
        if quality != Quality.FAILED:
            self.pose = pose
            self.prev_view = view
        log.allocated_blocks = self.scene.count
        self.logs.append(log)
        self.frame += 1
        return log

    def summary(self) -> dict:
        logs = self.logs
        return {
            "frames": len(logs),
            "tracked_good": sum(lg.quality == Quality.GOOD for lg in logs),
            "tracked_poor": sum(lg.quality == Quality.POOR for lg in logs),
            "tracked_failed": sum(lg.quality == Quality.FAILED for lg in logs),
            "relocalisations": 0,
            "surfels": self.scene.count,
            "surfels_dropped": self.scene.dropped,
        }
