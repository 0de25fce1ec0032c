"""Analytic RGB-D scenes used as ground truth.

Depth is rendered by exact ray/primitive intersection, so rendered depth,
the signed distance field and the trajectory poses are all exact.
World axes follow the camera convention of the identity pose: x right,
y down, z forward.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..core import Intrinsics, Pose, RgbdCalib

_NO_HIT = np.inf


class Texture:
    def __call__(self, points: np.ndarray) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError


@dataclass
class Constant(Texture):
    colour: tuple[int, int, int] = (128, 128, 128)

    def __call__(self, points):
        return np.broadcast_to(np.asarray(self.colour, dtype=np.float64), points.shape).copy()


@dataclass
class Checker(Texture):
    size: float = 0.1
    dark: tuple[int, int, int] = (40, 40, 40)
    light: tuple[int, int, int] = (220, 220, 220)

    def __call__(self, points):
        k = np.floor(points / self.size).astype(np.int64).sum(axis=-1) & 1
        return np.where(k[..., None] == 1, np.asarray(self.light, float), np.asarray(self.dark, float))


@dataclass
class Sinusoid(Texture):
    """Smooth band-limited pattern; good for photometric alignment."""

    wavelength: float = 0.15
    seed: int = 0

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        self._dirs = rng.normal(size=(6, 3))
        self._dirs /= np.linalg.norm(self._dirs, axis=1, keepdims=True)
        self._phase = rng.uniform(0, 2 * np.pi, size=6)
        self._tint = rng.uniform(0.6, 1.0, size=(6, 3))

    def __call__(self, points):
        acc = np.zeros(points.shape[:-1] + (3,))
        for d, ph, tint in zip(self._dirs, self._phase, self._tint):
            acc += np.sin(2 * np.pi * (points @ d) / self.wavelength + ph)[..., None] * tint
        return np.clip(128 + 100 * acc / 6 * 2, 0, 255)


@dataclass
class Primitive:
    texture: Texture = field(default_factory=Constant)

    def sdf(self, x):  # pragma: no cover - interface
        raise NotImplementedError

    def intersect(self, origin, dirs):  # pragma: no cover - interface
        raise NotImplementedError


@dataclass
class Plane(Primitive):
    """Points with ``normal . x == offset``; positive side along ``normal``."""

    normal: tuple = (0.0, 0.0, -1.0)
    offset: float = -1.0

    def __post_init__(self):
        n = np.asarray(self.normal, float)
        self._n = n / np.linalg.norm(n)

    def sdf(self, x):
        return x @ self._n - self.offset

    def intersect(self, origin, dirs):
        den = dirs @ self._n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.offset - origin @ self._n) / den
        return np.where((t > 0) & np.isfinite(t), t, _NO_HIT)


@dataclass
class Sphere(Primitive):
    center: tuple = (0.0, 0.0, 1.5)
    radius: float = 0.5

    def sdf(self, x):
        return np.linalg.norm(x - np.asarray(self.center, float), axis=-1) - self.radius

    def intersect(self, origin, dirs):
        oc = origin - np.asarray(self.center, float)
        a = np.sum(dirs * dirs, axis=-1)
        b = 2 * dirs @ oc
        c = oc @ oc - self.radius ** 2
        disc = b * b - 4 * a * c
        sq = np.sqrt(np.maximum(disc, 0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        t = np.where(t0 > 0, t0, t1)
        return np.where((disc >= 0) & (t > 0), t, _NO_HIT)


@dataclass
class Box(Primitive):
    """Solid axis-aligned box; ``inverted`` turns it into a room seen from inside."""

    center: tuple = (0.0, 0.0, 0.0)
    half_extents: tuple = (0.5, 0.5, 0.5)
    inverted: bool = False

    def sdf(self, x):
        q = np.abs(x - np.asarray(self.center, float)) - np.asarray(self.half_extents, float)
        outside = np.linalg.norm(np.maximum(q, 0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0)
        d = outside + inside
        return -d if self.inverted else d

    def intersect(self, origin, dirs):
        c = np.asarray(self.center, float)
        h = np.asarray(self.half_extents, float)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t1 = (c - h - origin) * inv
            t2 = (c + h - origin) * inv
        t1 = np.where(np.isnan(t1), -np.inf, t1)
        t2 = np.where(np.isnan(t2), np.inf, t2)
        tnear = np.minimum(t1, t2).max(axis=-1)
        tfar = np.maximum(t1, t2).min(axis=-1)
        hit = tnear <= tfar
        if self.inverted:
            return np.where(hit & (tfar > 0), tfar, _NO_HIT)
        t = np.where(tnear > 0, tnear, tfar)
        return np.where(hit & (t > 0), t, _NO_HIT)


@dataclass
class SyntheticScene:
    primitives: list[Primitive] = field(default_factory=list)
    trajectory: list[Pose] = field(default_factory=list)

    def sdf(self, points) -> np.ndarray:
        """Signed distance to the union of primitives (exact outside)."""
        x = np.asarray(points, dtype=np.float64)
        return np.min([p.sdf(x) for p in self.primitives], axis=0)

    def cast(self, pose: Pose, intrinsics: Intrinsics):
        """Per-pixel depth (z), hit primitive index and world hit points."""
        cam_to_world = pose.inverse()
        rays = intrinsics.rays()
        dirs = rays @ cam_to_world.rotation.T
        origin = cam_to_world.translation
        best = np.full(intrinsics.shape, _NO_HIT)
        which = np.full(intrinsics.shape, -1)
        for k, prim in enumerate(self.primitives):
            t = prim.intersect(origin, dirs)
            closer = t < best
            best = np.where(closer, t, best)
            which = np.where(closer, k, which)
        pts = origin + dirs * np.where(np.isfinite(best), best, 0)[..., None]
        return best, which, pts

    def render(self, pose: Pose, intrinsics: Intrinsics):
        """Float depth in metres (``-1`` where nothing is hit) and an 8-bit rgb image."""
        depth, which, pts = self.cast(pose, intrinsics)
        rgb = np.zeros(intrinsics.shape + (3,))
        for k, prim in enumerate(self.primitives):
            m = which == k
            if m.any():
                rgb[m] = prim.texture(pts[m])
        depth = np.where(np.isfinite(depth), depth, -1.0)
        return depth, np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def synth_render_depth(scene: SyntheticScene, pose: Pose, intrinsics: Intrinsics, noise: float = 0.0,
                       calib: RgbdCalib | None = None, rng=None, with_rgb: bool = False):
    """Render raw 16-bit depth (and optionally rgb) for ``pose`` (world-to-camera)."""
    calib = calib or RgbdCalib.simple(intrinsics)
    depth, rgb = scene.render(pose, intrinsics)
    if noise > 0:
        rng = np.random.default_rng(rng)
        valid = depth > 0
        depth = np.where(valid, depth + rng.normal(0, noise, depth.shape), depth)
    raw = calib.metres_to_depth(depth)
    return (raw, rgb) if with_rgb else raw


def look_at(eye, target, down=(0.0, 1.0, 0.0)) -> Pose:
    """World-to-camera pose of a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, float)
    z = np.asarray(target, float) - eye
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(down, float), z)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross((0.0, 0.0, 1.0), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return Pose(R, -R @ eye)


def orbit(center, radius: float, n: int, height: float = 0.0, arc: float = 2 * np.pi,
          start: float = 0.0) -> list[Pose]:
    """Cameras on a horizontal circle around ``center`` looking at it."""
    c = np.asarray(center, float)
    poses = []
    for k in range(n):
        a = start + arc * k / max(n, 1)
        eye = c + np.array([radius * np.sin(a), height, -radius * np.cos(a)])
        poses.append(look_at(eye, c))
    return poses


def sphere_scene(radius: float = 0.5, center=(0.0, 0.0, 1.5), texture: Texture | None = None) -> SyntheticScene:
    return SyntheticScene([Sphere(texture or Constant(), center=center, radius=radius)])


def sphere_in_room(texture: bool = True) -> SyntheticScene:
    tex = Sinusoid(0.3, seed=1) if texture else Constant()
    room = Box(tex, center=(0.0, 0.0, 1.0), half_extents=(2.0, 1.2, 2.5), inverted=True)
    return SyntheticScene([room, Sphere(Sinusoid(0.2, seed=2) if texture else Constant(),
                                        center=(0.3, 0.2, 1.6), radius=0.4),
                           Box(Constant((200, 120, 60)), center=(-0.6, 0.5, 1.9), half_extents=(0.25, 0.25, 0.25))])


def plane_scene(distance: float = 1.0, texture: Texture | None = None) -> SyntheticScene:
    """Fronto-parallel wall at ``z = distance``."""
    return SyntheticScene([Plane(texture or Constant(), normal=(0, 0, -1), offset=-distance)])


def default_intrinsics(width: int = 320, height: int = 240) -> Intrinsics:
    """Kinect-like field of view at the requested resolution."""
    f = 525.0 * width / 640.0
    return Intrinsics(width, height, f, f, (width - 1) / 2.0, (height - 1) / 2.0)
