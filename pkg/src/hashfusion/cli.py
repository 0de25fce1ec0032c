"""Command-line pipeline runner over PGM/PPM image sequences.

Run summary (``summary.txt``) is one ``key=value`` per line; keys are
stable: ``frames``, ``tracked_good``, ``tracked_poor``, ``tracked_failed``,
``relocalisations``, ``blocks_allocated``, ``swap_in_total``,
``swap_out_total``, ``swap_in_max_per_frame``, ``swap_out_max_per_frame``,
``keyframes`` (voxel maps), ``submaps``, ``constraints``, ``loop_closures``
(loop-closure mode), ``surfels``, ``surfels_dropped`` (surfel maps), then
``status`` and, after a read error, ``failed_frame``.

Settings files hold ``key = value`` lines; ``#`` starts a comment.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from .core import Pose
from .engine import Settings, SurfelEngine, TrackerConfig, VoxelEngine
from .fusion import SceneParams
from .io.calib import CalibrationError, load_calibration
from .io.mesh import read_trajectory, write_mesh, write_trajectory
from .io.netpbm import ImageFormatError, load_image_stream, write_netpbm
from .mapgraph import MultiEngine
from .tracking import EXTENDED_OPTIONS, ICP_OPTIONS, TrackerOptions

log = logging.getLogger("hashfusion")

TRACKER_TYPES = ("icp", "rgb", "extended", "fixed")
# tracker-string key -> (TrackerOptions field, parser)
_TRACKER_KEYS = {
    "levels": ("levels", int),
    "iterations": ("iterations", lambda v: tuple(int(x) for x in v.split(":"))),
    "huberDelta": ("huber_delta", lambda v: None if v.lower() == "none" else float(v)),
    "depthWeighting": ("depth_weighting", lambda v: _flag(v)),
    "outlierThreshold": ("outlier_threshold", lambda v: None if v.lower() == "none" else float(v)),
    "normalThreshold": ("normal_threshold", lambda v: None if v.lower() == "none" else float(np.cos(np.deg2rad(float(v))))),
    "colour": ("use_colour", lambda v: _flag(v)),
    "colourWeight": ("colour_weight", float),
    "tukeyC": ("tukey_c", float),
    "minStep": ("min_step", float),
    "minPoints": ("min_points", int),
}


class ConfigError(ValueError):
    pass


def _flag(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def parse_tracker_config(text: str) -> TrackerConfig:
    """``type=<icp|rgb|extended|fixed>,key=value,...``; empty means the extended tracker without colour.

    ``iterations`` takes coarse-to-fine counts separated by colons and
    ``normalThreshold`` is an angle in degrees.
    """
    items = [p.strip() for p in text.split(",") if p.strip()]
    pairs = []
    for it in items:
        if "=" not in it:
            raise ConfigError(f"tracker option {it!r} is not key=value")
        k, v = (x.strip() for x in it.split("=", 1))
        pairs.append((k, v))
    kind = "extended"
    for k, v in pairs:
        if k == "type":
            if v not in TRACKER_TYPES:
                raise ConfigError(f"unknown tracker type {v!r}; valid types: {', '.join(TRACKER_TYPES)}")
            kind = v
    opts = ICP_OPTIONS if kind == "icp" else EXTENDED_OPTIONS if kind == "extended" else TrackerOptions()
    skip_points = False
    changes = {}
    for k, v in pairs:
        if k == "type":
            continue
        if k == "skipPoints":
            skip_points = _flag(v)
            continue
        if k not in _TRACKER_KEYS:
            valid = ", ".join(["type", "skipPoints", *_TRACKER_KEYS])
            raise ConfigError(f"unknown tracker key {k!r}; valid keys: {valid}")
        name, conv = _TRACKER_KEYS[k]
        try:
            changes[name] = conv(v)
        except ValueError as exc:
            raise ConfigError(f"bad value for {k}: {v!r} ({exc})") from None
    if "levels" in changes and "iterations" not in changes:
        its = tuple(opts.iterations)
        n = changes["levels"]
        changes["iterations"] = its[-n:] if n <= len(its) else (its[0],) * (n - len(its)) + its
    if kind == "icp" and changes.get("use_colour"):
        raise ConfigError("the icp tracker has no colour term; use type=extended")
    try:
        opts = replace(opts, **changes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if len(opts.iterations) != opts.levels:
        raise ConfigError(f"iterations lists {len(opts.iterations)} levels but levels={opts.levels}")
    return TrackerConfig(kind, opts, skip_points)


_ENUMS = {
    "libMode": ("lib_mode", {"basic": "basic", "loopclosure": "loopclosure"}),
    "mapKind": ("map_kind", {"voxel": "voxel", "surfel": "surfel"}),
    "swappingMode": ("swapping", {"disabled": "disabled", "off": "disabled", "enabled": "enabled", "on": "enabled",
                                  "delete": "delete"}),
    "behaviourOnFailure": ("on_failure", {"relocalise": "relocalise", "ignore": "ignore",
                                          "stop": "stop", "stop_integration": "stop"}),
}
_FLAGS = {"useApproximateRaycast": "use_approximate_raycast", "useBilateralFilter": "use_bilateral_filter",
          "createMeshingEngine": "create_meshing_engine"}
_INTS = {"swapCapacity": "swap_capacity", "seed": "seed", "bucketCount": "bucket_count",
         "excessCount": "excess_count", "blockCapacity": "block_capacity", "ferns": "n_ferns",
         "fernTests": "fern_tests", "relocCandidates": "reloc_candidates"}
_FLOATS = {"swapMargin": "swap_margin", "harvestThreshold": "harvest_threshold"}
_SCENE = {"voxelSize": ("voxel_size", float), "mu": ("mu", float), "maxW": ("max_w", int),
          "viewFrustum_min": ("view_frustum_min", float), "viewFrustum_max": ("view_frustum_max", float),
          "stopIntegratingAtMaxW": ("stop_integrating_at_max_w", _flag)}
_SURFEL = {"surfel.supersample": ("supersample", int), "surfel.normalGate": ("normal_gate", float),
           "surfel.depthGate": ("depth_gate", float), "surfel.alphaPolicy": ("alpha_policy", str),
           "surfel.stableConfidence": ("stable_confidence", float), "surfel.maxAge": ("max_age", int),
           "surfel.capacity": ("capacity", int)}


def settings_keys() -> list[str]:
    return [*_ENUMS, "trackerConfig", "skipPoints", *_FLAGS, *_INTS, *_FLOATS, *_SCENE, *_SURFEL]


def parse_settings(text: str, base: Settings | None = None) -> Settings:
    kw = dict(vars(base or Settings()))
    scene = {}
    surfel = dict(kw["surfel"])
    skip_points = None
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, val = (x.strip() for x in line.split("=", 1))
        try:
            if key in _ENUMS:
                name, table = _ENUMS[key]
                if val.lower() not in table:
                    raise ConfigError(f"{key} must be one of {', '.join(table)}")
                kw[name] = table[val.lower()]
            elif key == "trackerConfig":
                kw["tracker"] = parse_tracker_config(val)
            elif key == "skipPoints":
                skip_points = _flag(val)
            elif key in _FLAGS:
                kw[_FLAGS[key]] = _flag(val)
            elif key in _INTS:
                kw[_INTS[key]] = int(val)
            elif key in _FLOATS:
                kw[_FLOATS[key]] = float(val)
            elif key in _SCENE:
                name, conv = _SCENE[key]
                scene[name] = conv(val)
            elif key in _SURFEL:
                name, conv = _SURFEL[key]
                surfel[name] = conv(val)
            else:
                raise ConfigError(f"unknown key {key!r}; valid keys: {', '.join(settings_keys())}")
        except ConfigError as exc:
            raise ConfigError(f"line {n}: {exc}") from None
        except ValueError as exc:
            raise ConfigError(f"line {n}: bad value for {key}: {val!r} ({exc})") from None
    if scene:
        try:
            kw["scene"] = replace(kw["scene"], **scene)
        except ValueError as exc:
            raise ConfigError(f"scene parameters: {exc}") from None
    if skip_points is not None:
        kw["tracker"] = replace(kw["tracker"], skip_points=skip_points)
    kw["surfel"] = surfel
    try:
        return Settings(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def make_engine(calib, settings: Settings):
    if settings.map_kind == "surfel":
        return SurfelEngine(calib, settings)
    if settings.lib_mode == "loopclosure":
        return MultiEngine(calib, settings)
    return VoxelEngine(calib, settings)


def shade(state) -> np.ndarray:
    """Grey Lambertian image of a render, lit from the camera."""
    H, W = state.hit.shape
    img = np.zeros((H, W), dtype=np.uint8)
    if state.hit.any():
        n = np.nan_to_num(state.normals[state.hit]) @ state.pose.rotation.T
        img[state.hit] = np.clip(np.rint(255 * np.clip(-n[:, 2], 0, 1)), 0, 255).astype(np.uint8)
    return img


def _current_render(engine):
    if isinstance(engine, MultiEngine):
        p = engine.graph.primary
        return p.render_state if p is not None else None
    return engine.render_state


def run_pipeline(settings: Settings, calib_path, input_pattern: str, out_dir, *, rgb_pattern: str | None = None,
                 poses_path=None, save_renders: bool = False, save_mesh: bool | None = None,
                 start: int = 0, depth_conversion: str = "affine") -> dict:
    """Process an image sequence and write poses, renders, mesh and a summary into ``out_dir``."""
    calib = load_calibration(calib_path, depth_conversion)
    os.makedirs(out_dir, exist_ok=True)
    hints = None
    if poses_path is not None:
        hints = [p.inverse() for p in read_trajectory(poses_path)[1]]
    if hints is not None and settings.tracker.kind != "fixed":
        settings = replace(settings, seed_tracker_with_hint=True)
    engine = make_engine(calib, settings)
    stamps, poses = [], []
    status, failed = "ok", None
    k = 0
    stream = load_image_stream(input_pattern, rgb_pattern, start)
    try:
        while True:
            try:
                frame = next(stream)
            except StopIteration:
                break
            except (ImageFormatError, OSError, ValueError) as exc:
                status, failed = f"read error: {exc}", start + k
                log.error("frame %d: %s", start + k, exc)
                break
            hint = None
            if hints is not None:
                if k >= len(hints):
                    raise ConfigError(f"pose file has {len(hints)} poses but frame {frame.index} was read")
                hint = hints[k]
            lg = engine.process_frame(frame.depth, frame.rgb, hint)
            stamps.append(float(frame.index))
            poses.append(lg.pose.inverse())
            log.info("frame %d: %s %s", frame.index, lg.quality.name, ",".join(lg.stages))
            if save_renders:
                st = _current_render(engine)
                if st is not None:
                    write_netpbm(os.path.join(out_dir, f"render_{frame.index:05d}.pgm"), shade(st))
            k += 1
    finally:
        if isinstance(engine, MultiEngine):
            engine.close()
        write_trajectory(os.path.join(out_dir, "poses.txt"), stamps, poses)
    want_mesh = settings.create_meshing_engine if save_mesh is None else save_mesh
    if want_mesh and settings.map_kind == "voxel":
        write_mesh(engine.mesh(), os.path.join(out_dir, "mesh.obj"))
    if settings.map_kind == "surfel":
        engine.scene.export(os.path.join(out_dir, "surfels.txt"))
    summary = dict(engine.summary())
    summary["status"] = "ok" if failed is None else "read_error"
    if failed is not None:
        summary["failed_frame"] = failed
    with open(os.path.join(out_dir, "summary.txt"), "w") as fh:
        for key, val in summary.items():
            fh.write(f"{key}={val}\n")
    return summary


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hashfusion", description="Dense RGB-D reconstruction from image files.")
    ap.add_argument("--calib", required=True, help="calibration file")
    ap.add_argument("--input", required=True, help="depth PGM pattern, e.g. frames/depth_%%04i.pgm")
    ap.add_argument("--rgb", help="colour PPM pattern")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--settings", help="settings file of key = value lines")
    ap.add_argument("--tracker", help="tracker string, e.g. type=icp,levels=2")
    ap.add_argument("--mode", choices=("basic", "loopclosure"))
    ap.add_argument("--map", choices=("voxel", "surfel"))
    ap.add_argument("--swapping", choices=("off", "on", "delete"))
    ap.add_argument("--on-failure", choices=("relocalise", "ignore", "stop"))
    ap.add_argument("--depth-conversion", choices=("affine", "inverse"), default="affine",
                    help="raw depth to metres: scale*raw+offset (affine) or (raw-offset)/scale (inverse)")
    ap.add_argument("--poses", help="TUM trajectory used as per-frame pose hints")
    ap.add_argument("--start", type=int, default=0, help="first frame index")
    ap.add_argument("--save-renders", action="store_true")
    ap.add_argument("--save-mesh", action="store_true")
    ap.add_argument("--seed", type=int)
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        settings = Settings()
        if args.settings:
            with open(args.settings) as fh:
                settings = parse_settings(fh.read(), settings)
        overrides = {}
        if args.tracker is not None:
            overrides["tracker"] = parse_tracker_config(args.tracker)
        if args.mode:
            overrides["lib_mode"] = args.mode
        if args.map:
            overrides["map_kind"] = args.map
        if args.swapping:
            overrides["swapping"] = {"off": "disabled", "on": "enabled", "delete": "delete"}[args.swapping]
        if args.on_failure:
            overrides["on_failure"] = args.on_failure
        if args.seed is not None:
            overrides["seed"] = args.seed
        settings = replace(settings, **overrides)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"hashfusion: settings: {exc}", file=sys.stderr)
        return 2
    try:
        summary = run_pipeline(settings, args.calib, args.input, args.out, rgb_pattern=args.rgb,
                               poses_path=args.poses, save_renders=args.save_renders,
                               save_mesh=True if args.save_mesh else None, start=args.start,
                               depth_conversion=args.depth_conversion)
    except (CalibrationError, ConfigError) as exc:
        print(f"hashfusion: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"hashfusion: {exc}", file=sys.stderr)
        return 2
    for key, val in summary.items():
        print(f"{key}={val}")
    if summary["status"] != "ok":
        print(f"hashfusion: stopped at frame {summary['failed_frame']}", file=sys.stderr)
        return 1
    return 0


__all__ = ["Settings", "SceneParams", "parse_settings", "parse_tracker_config", "run_pipeline", "main", "Pose"]


if __name__ == "__main__":
    sys.exit(main())
