"""Geometry primitives, camera models and view preparation.

Poses map points from one frame into another: a camera pose ``M`` stored in a
tracking state maps world points into the camera (``x_cam = R x_world + t``).
Depth images hold metres, with invalid readings set to ``INVALID_DEPTH``;
every consumer tests ``depth > 0``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.transform import Rotation

INVALID_DEPTH = -1.0

# luma weights used for the rgb -> intensity map
INTENSITY_WEIGHTS = np.array([0.299, 0.587, 0.114])


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x -> R x + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise ValueError("rotation must be orthonormal with determinant +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_matrix(cls, m) -> Pose:
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def exp(cls, twist) -> Pose:
        """Pose from a 6-vector (rotation vector, translation)."""
        twist = np.asarray(twist, dtype=float)
        return cls(Rotation.from_rotvec(twist[:3]).as_matrix(), twist[3:])

    @classmethod
    def from_quaternion(cls, translation, quat_xyzw) -> Pose:
        return cls(Rotation.from_quat(quat_xyzw).as_matrix(), translation)

    def log(self) -> np.ndarray:
        """Inverse of :meth:`exp`."""
        return np.concatenate([Rotation.from_matrix(self.rotation).as_rotvec(), self.translation])

    def quaternion(self) -> np.ndarray:
        return Rotation.from_matrix(self.rotation).as_quat()

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> Pose:
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: Pose) -> Pose:
        """``self ∘ other``: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x @ self.rotation.T + self.translation

    def rotation_angle(self) -> float:
        """Rotation magnitude in radians."""
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(np.array_equal(self.rotation, other.rotation)
                    and np.array_equal(self.translation, other.translation))

    def __hash__(self):
        # adding 0.0 folds -0.0 into 0.0 so equal poses hash alike
        return hash(((self.rotation + 0.0).tobytes(), (self.translation + 0.0).tobytes()))

    def __repr__(self):
        return f"Pose(rotvec={np.round(self.log()[:3], 6)}, t={np.round(self.translation, 6)})"


def pose_apply(pose: Pose, x) -> np.ndarray:
    return pose.apply(x)


@dataclass(frozen=True)
class Intrinsics:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def scaled(self, factor: float, width: int | None = None, height: int | None = None) -> Intrinsics:
        return Intrinsics(
            width if width is not None else max(1, int(self.width * factor)),
            height if height is not None else max(1, int(self.height * factor)),
            self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
        )

    def level(self, L: int) -> Intrinsics:
        """Intrinsics of pyramid level ``L``."""
        s = 2 ** L
        return self.scaled(1.0 / s, self.width // s, self.height // s)

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Camera points ``(..., 3)`` to continuous pixel coordinates and depth."""
        z = points[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * points[..., 0] / z + self.cx
            v = self.fy * points[..., 1] / z + self.cy
        return u, v, z

    def rays(self) -> np.ndarray:
        """Per-pixel camera rays with unit z, shape ``(H, W, 3)``."""
        v, u = np.mgrid[0:self.height, 0:self.width].astype(float)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)

    def backproject(self, depth: np.ndarray) -> np.ndarray:
        """Depth image to camera points; invalid pixels give NaN."""
        pts = self.rays() * depth[..., None]
        pts[depth <= 0] = np.nan
        return pts


@dataclass(frozen=True)
class RgbdCalib:
    """Calibration of a registered rgb + depth rig.

    ``depth_conversion`` selects how raw sensor units become metres:
    ``"affine"`` gives ``scale * raw + offset``, ``"inverse"`` gives
    ``(raw - offset) / scale``.
    """

    intrinsics_rgb: Intrinsics
    intrinsics_d: Intrinsics
    extrinsics_d_to_rgb: Pose = field(default_factory=Pose)
    depth_affine: tuple[float, float] = (1.0 / 1000.0, 0.0)
    depth_conversion: str = "affine"
    # 3x4 extrinsic block as read from file, before re-orthonormalisation
    extrinsics_raw: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.depth_affine[0] == 0:
            raise ValueError("depth affine scale must be non-zero")
        if self.depth_conversion not in ("affine", "inverse"):
            raise ValueError(f"unknown depth conversion {self.depth_conversion!r}")

    def depth_to_metres(self, raw: np.ndarray) -> np.ndarray:
        raw = np.asarray(raw)
        scale, offset = self.depth_affine
        r = raw.astype(np.float64)
        m = scale * r + offset if self.depth_conversion == "affine" else (r - offset) / scale
        m = np.where((raw > 0) & (m > 0), m, INVALID_DEPTH)
        return m.astype(np.float32)

    def metres_to_depth(self, metres: np.ndarray) -> np.ndarray:
        scale, offset = self.depth_affine
        m = np.asarray(metres, dtype=np.float64)
        raw = (m - offset) / scale if self.depth_conversion == "affine" else m * scale + offset
        raw = np.where(np.isfinite(m) & (m > 0), np.rint(raw), 0)
        return np.clip(raw, 0, 65535).astype(np.uint16)

    def depth_resolution(self) -> float:
        """Metres per raw unit around 1 m."""
        if self.depth_conversion == "affine":
            return abs(self.depth_affine[0])
        return 1.0 / abs(self.depth_affine[0])

    @classmethod
    def simple(cls, intrinsics: Intrinsics, depth_scale: float = 1.0 / 5000.0) -> RgbdCalib:
        """Registered rig sharing one set of intrinsics."""
        return cls(intrinsics, intrinsics, Pose(), (depth_scale, 0.0))


@dataclass
class PyramidLevel:
    depth: np.ndarray
    intrinsics: Intrinsics
    intensity: np.ndarray | None = None


@dataclass
class View:
    calib: RgbdCalib
    depth_raw: np.ndarray
    depth_m: np.ndarray
    rgb: np.ndarray | None = None
    intensity: np.ndarray | None = None
    normals: np.ndarray | None = None
    pyramid: list[PyramidLevel] = field(default_factory=list)

    @property
    def intrinsics(self) -> Intrinsics:
        return self.calib.intrinsics_d


def rgb_to_intensity(rgb: np.ndarray) -> np.ndarray:
    """8-bit rgb to intensity in [0, 1]."""
    return (np.asarray(rgb, dtype=np.float64) @ INTENSITY_WEIGHTS / 255.0).astype(np.float32)


def bilateral_filter(depth: np.ndarray, range_sigma: float, spatial_sigma: float = 2.0,
                     radius: int = 2) -> np.ndarray:
    """Edge-preserving smoothing over valid pixels only."""
    d = depth.astype(np.float64)
    valid = d > 0
    pad = np.pad(d, radius, constant_values=INVALID_DEPTH)
    num = np.zeros_like(d)
    den = np.zeros_like(d)
    H, W = d.shape
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            nb = pad[radius + dy:radius + dy + H, radius + dx:radius + dx + W]
            w = np.exp(-(dx * dx + dy * dy) / (2 * spatial_sigma ** 2) - (nb - d) ** 2 / (2 * range_sigma ** 2))
            w = np.where(nb > 0, w, 0.0)
            num += w * nb
            den += w
    out = np.where(valid, num / np.where(den > 0, den, 1.0), INVALID_DEPTH)
    # constant neighbourhoods stay exact
    out = np.where(valid & np.isclose(out, d, rtol=0, atol=1e-12), d, out)
    return out.astype(np.float32)


def downsample_depth(depth: np.ndarray) -> np.ndarray:
    """2x2 mean of the valid pixels; invalid where none are valid."""
    H, W = depth.shape[0] // 2, depth.shape[1] // 2
    blocks = depth[:2 * H, :2 * W].reshape(H, 2, W, 2).astype(np.float64)
    valid = blocks > 0
    n = valid.sum(axis=(1, 3))
    s = np.where(valid, blocks, 0).sum(axis=(1, 3))
    return np.where(n > 0, s / np.maximum(n, 1), INVALID_DEPTH).astype(np.float32)


def downsample_image(img: np.ndarray) -> np.ndarray:
    H, W = img.shape[0] // 2, img.shape[1] // 2
    blocks = img[:2 * H, :2 * W].reshape(H, 2, W, 2, *img.shape[2:]).astype(np.float64)
    return blocks.mean(axis=(1, 3)).astype(np.float32)


def compute_normals(depth_m: np.ndarray, intrinsics: Intrinsics) -> np.ndarray:
    """Unit normals from central differences of backprojected points.

    Normals face the camera. Pixels with an invalid 4-neighbour, and the
    image border, are NaN.
    """
    pts = intrinsics.backproject(depth_m)
    normals = np.full(pts.shape, np.nan)
    dx = pts[1:-1, 2:] - pts[1:-1, :-2]
    dy = pts[2:, 1:-1] - pts[:-2, 1:-1]
    n = np.cross(dx, dy)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        n = n / norm
        flip = np.sum(n * pts[1:-1, 1:-1], axis=-1) > 0
    n[flip] *= -1
    ok = np.isfinite(n).all(axis=-1) & (norm[..., 0] > 0)
    n[~ok] = np.nan
    normals[1:-1, 1:-1] = n
    return normals


def build_view(raw_depth: np.ndarray, rgb: np.ndarray | None, calib: RgbdCalib, *,
               bilateral: bool = False, levels: int = 3, normals: bool = True) -> View:
    """Convert a raw frame into a :class:`View` with derived images and pyramid."""
    raw_depth = np.asarray(raw_depth)
    if raw_depth.shape != calib.intrinsics_d.shape:
        raise ValueError(f"depth image is {raw_depth.shape[::-1]}, calibration expects "
                         f"{calib.intrinsics_d.width}x{calib.intrinsics_d.height}")
    if rgb is not None and rgb.shape[:2] != calib.intrinsics_rgb.shape:
        raise ValueError(f"rgb image is {rgb.shape[1::-1]}, calibration expects "
                         f"{calib.intrinsics_rgb.width}x{calib.intrinsics_rgb.height}")
    if levels < 1:
        raise ValueError("levels must be >= 1")
    depth = calib.depth_to_metres(raw_depth)
    if bilateral:
        depth = bilateral_filter(depth, range_sigma=10 * calib.depth_resolution())
    intensity = rgb_to_intensity(rgb) if rgb is not None else None
    view = View(calib, raw_depth, depth, rgb, intensity)
    if normals:
        view.normals = compute_normals(depth, calib.intrinsics_d)
    d, inten = depth, intensity
    for L in range(levels):
        if L > 0:
            d = downsample_depth(d)
            inten = downsample_image(inten) if inten is not None else None
        view.pyramid.append(PyramidLevel(d, calib.intrinsics_d.level(L), inten))
    return view


def with_depth(view: View, depth_m: np.ndarray) -> View:
    """Copy of ``view`` with replaced metric depth (pyramid rebuilt)."""
    v = replace(view, depth_m=depth_m.astype(np.float32), pyramid=[])
    d, inten = v.depth_m, view.intensity
    for L in range(len(view.pyramid)):
        if L > 0:
            d = downsample_depth(d)
            inten = downsample_image(inten) if inten is not None else None
        v.pyramid.append(PyramidLevel(d, view.intrinsics.level(L), inten))
    return v
