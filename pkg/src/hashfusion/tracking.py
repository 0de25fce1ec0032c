"""Camera tracking against raycast model maps.

Poses follow the library convention: ``pose_d`` maps world points into the
depth camera. Internally the solvers refine the inverse (camera-to-world)
with left-multiplied increments ``exp(delta) @ T``, ``delta = (omega, v)``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator

from .core import Intrinsics, Pose, View, compute_normals, downsample_image
from .raycast import RenderState
from .validation import check_pose, check_view

SIGMA0 = 0.0012
# the per-pixel depth weight halves at 3 m
SIGMA1 = SIGMA0 * (np.sqrt(2.0) - 1.0) / 3.0


class Quality(enum.IntEnum):
    FAILED = 0
    POOR = 1
    GOOD = 2


@dataclass
class TrackerIterationSummary:
    inlier_fraction: float = 0.0
    hessian_det: float = 0.0
    residual_mean: float = np.inf
    iterations_run: int = 0
    n_points: int = 0
    degenerate: bool = False
    # (mean energy, accepted) per LM trial
    history: list = field(default_factory=list)


@dataclass
class TrackingState:
    pose_d: Pose = field(default_factory=Pose)
    quality: Quality = Quality.GOOD
    age_since_last_good: int = 0
    render_state: RenderState | None = None
    summary: TrackerIterationSummary | None = None


@dataclass(frozen=True)
class TrackerOptions:
    levels: int = 3
    # iteration caps from coarsest to finest level
    iterations: tuple = (20, 10, 6)
    huber_delta: float | None = None
    depth_weighting: bool = False
    outlier_threshold: float | None = None
    # minimum cosine between data and model normals
    normal_threshold: float | None = None
    use_colour: bool = False
    colour_weight: float = 0.3
    tukey_c: float = 0.25
    min_step: float = 1e-4
    min_points: int = 100
    det_threshold: float = 1e-12

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if len(self.iterations) < self.levels:
            raise ValueError("need one iteration cap per level")


NORMAL_GATE = float(np.cos(np.deg2rad(20.0)))
ICP_OPTIONS = TrackerOptions(normal_threshold=NORMAL_GATE)
EXTENDED_OPTIONS = TrackerOptions(huber_delta=0.01, depth_weighting=True, outlier_threshold=0.04,
                                  normal_threshold=NORMAL_GATE)


# -- robust norms ------------------------------------------------------------
def huber_rho(r, delta):
    a = np.abs(r)
    return np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))


def huber_weight(r, delta):
    a = np.abs(r)
    return np.where(a <= delta, 1.0, delta / np.maximum(a, 1e-300))


def tukey_rho(r, c):
    x = np.minimum((r / c) ** 2, 1.0)
    return c * c / 6.0 * (1.0 - (1.0 - x) ** 3)


def tukey_weight(r, c):
    x = (r / c) ** 2
    return np.where(x <= 1.0, (1.0 - x) ** 2, 0.0)


def depth_weight(z):
    """Relative confidence of a depth reading, 1 at the sensor and 1/2 at 3 m."""
    return (SIGMA0 / (SIGMA0 + SIGMA1 * np.asarray(z))) ** 2


# -- image sampling ----------------------------------------------------------
def bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray, with_gradient: bool = False):
    """Bilinear lookup at continuous pixel coordinates.

    Returns ``(value, valid[, dI/dx, dI/dy])``; the gradient is the exact
    derivative of the interpolant. Samples need ``0 <= x < W-1`` and
    ``0 <= y < H-1``. NaN pixels invalidate a sample.
    """
    H, W = img.shape[:2]
    valid = (x >= 0) & (x < W - 1) & (y >= 0) & (y < H - 1)
    x0 = np.where(valid, np.floor(x), 0).astype(np.int64)
    y0 = np.where(valid, np.floor(y), 0).astype(np.int64)
    fx = np.where(valid, x - x0, 0.0)
    fy = np.where(valid, y - y0, 0.0)
    if img.ndim == 3:
        fx, fy = fx[:, None], fy[:, None]
    i00, i10 = img[y0, x0], img[y0, x0 + 1]
    i01, i11 = img[y0 + 1, x0], img[y0 + 1, x0 + 1]
    val = (1 - fy) * ((1 - fx) * i00 + fx * i10) + fy * ((1 - fx) * i01 + fx * i11)
    fin = np.isfinite(val) if val.ndim == 1 else np.isfinite(val).all(axis=1)
    valid = valid & fin
    if not with_gradient:
        return val, valid
    gx = (1 - fy) * (i10 - i00) + fy * (i11 - i01)
    gy = (1 - fx) * (i01 - i00) + fx * (i11 - i10)
    return val, valid, gx, gy


def _projection_jacobian(x: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """d(pixel)/d(camera point), ``(N, 2, 3)``."""
    z = x[:, 2]
    J = np.zeros((len(x), 2, 3))
    J[:, 0, 0] = intr.fx / z
    J[:, 0, 2] = -intr.fx * x[:, 0] / z ** 2
    J[:, 1, 1] = intr.fy / z
    J[:, 1, 2] = -intr.fy * x[:, 1] / z ** 2
    return J


def _point_jacobian(q: np.ndarray) -> np.ndarray:
    """d(exp(delta) q)/d(delta) at delta = 0, ``(N, 3, 6)``."""
    J = np.zeros((len(q), 3, 6))
    J[:, 0, 1], J[:, 0, 2] = q[:, 2], -q[:, 1]
    J[:, 1, 0], J[:, 1, 2] = -q[:, 2], q[:, 0]
    J[:, 2, 0], J[:, 2, 1] = q[:, 1], -q[:, 0]
    J[:, :, 3:] = np.eye(3)
    return J


# -- residual terms ----------------------------------------------------------
def point_to_plane(points_cam: np.ndarray, cam_to_world: Pose, model_points: np.ndarray,
                   model_normals: np.ndarray):
    """Residuals ``n . (T p - v)`` and their Jacobian w.r.t. a left increment of ``T``."""
    q = cam_to_world.apply(points_cam)
    r = np.sum(model_normals * (q - model_points), axis=1)
    J = np.concatenate([np.cross(q, model_normals), model_normals], axis=1)
    return r, J


def associate(points_cam: np.ndarray, cam_to_world: Pose, maps: RenderState):
    """Project data points into the model maps; bilinear lookup with holes.

    Returns ``(model_points, model_normals, valid)``.
    """
    q = cam_to_world.apply(points_cam)
    u, v, z = maps.intrinsics.project(maps.pose.apply(q))
    ok = z > 0
    u = np.where(ok, u, -1)
    V, vv = bilinear(maps.points, u, v)
    N, nv = bilinear(maps.normals, u, v)
    valid = ok & vv & nv
    norm = np.linalg.norm(N, axis=1, keepdims=True)
    valid &= norm[:, 0] > 0.5
    N = N / np.where(norm > 0, norm, 1)
    return V, N, valid


def photometric(points_cam: np.ndarray, intens_cur: np.ndarray, cam_to_world: Pose, prev_intensity: np.ndarray,
                prev_pose_rgb: Pose, intr_rgb: Intrinsics):
    """Frame-to-frame intensity residuals and Jacobian.

    Each current point goes to the world with ``cam_to_world``, into the
    previous rgb camera with ``prev_pose_rgb`` and is bilinearly sampled
    there. Returns ``(r, J, valid)``.
    """
    q = cam_to_world.apply(points_cam)
    x = prev_pose_rgb.apply(q)
    u, v, z = intr_rgb.project(x)
    front = z > 0
    u = np.where(front, u, -1)
    val, valid, gx, gy = bilinear(prev_intensity, u, v, with_gradient=True)
    valid &= front
    r = intens_cur - val
    # r = I_cur - I_prev(pi(R_prev exp(delta) q + t_prev))
    grad = np.stack([gx, gy], axis=1)[:, None, :]
    J = -(grad @ _projection_jacobian(np.where(valid[:, None], x, 1.0), intr_rgb)
          @ prev_pose_rgb.rotation @ _point_jacobian(q))[:, 0, :]
    return r, J, valid


# -- the optimiser -----------------------------------------------------------
@dataclass
class _Level:
    points: np.ndarray          # data points in the depth camera
    z: np.ndarray
    normals: np.ndarray         # data normals in the depth camera (NaN if unknown)
    intens: np.ndarray | None   # current intensity per point
    prev_intensity: np.ndarray | None
    intr_rgb: Intrinsics | None


@dataclass
class _Eval:
    energy: float
    H: np.ndarray
    g: np.ndarray
    n_geo: int
    n_inliers: int
    resid_abs_mean: float
    H_plain: np.ndarray


def _evaluate(level: _Level, T: Pose, maps: RenderState, opts: TrackerOptions, prev_pose_rgb: Pose | None):
    V, N, ok = associate(level.points, T, maps)
    if opts.normal_threshold is not None:
        dn = level.normals @ T.rotation.T
        with np.errstate(invalid="ignore"):
            ok &= np.sum(dn * N, axis=1) >= opts.normal_threshold
    r, J = point_to_plane(level.points[ok], T, V[ok], N[ok])
    z = level.z[ok]
    keep = np.ones(len(r), dtype=bool)
    if opts.outlier_threshold is not None:
        keep = np.abs(r) <= opts.outlier_threshold
    r, J, z = r[keep], J[keep], z[keep]
    n = len(r)
    wd = depth_weight(z) if opts.depth_weighting else np.ones(n)
    if opts.huber_delta is not None:
        rho, w = huber_rho(r, opts.huber_delta), huber_weight(r, opts.huber_delta)
    else:
        rho, w = 0.5 * r * r, np.ones(n)
    if n == 0:
        return _Eval(np.inf, np.zeros((6, 6)), np.zeros(6), 0, 0, np.inf, np.zeros((6, 6)))
    energy = np.sum(wd * rho) / n
    H = (J * (wd * w)[:, None]).T @ J / n
    g = J.T @ (wd * w * r) / n
    H_plain = J.T @ J / n
    if opts.use_colour and opts.colour_weight > 0 and level.prev_intensity is not None:
        rc, Jc, vc = photometric(level.points, level.intens, T, level.prev_intensity, prev_pose_rgb, level.intr_rgb)
        vc &= np.isfinite(level.intens)
        rc, Jc, zc = rc[vc], Jc[vc], level.z[vc]
        m = len(rc)
        if m:
            wdc = depth_weight(zc) if opts.depth_weighting else np.ones(m)
            wt = tukey_weight(rc, opts.tukey_c)
            s = opts.colour_weight / m
            energy += s * np.sum(wdc * tukey_rho(rc, opts.tukey_c))
            H = H + s * (Jc * (wdc * wt)[:, None]).T @ Jc
            g = g + s * Jc.T @ (wdc * wt * rc)
    return _Eval(float(energy), H, g, n, n, float(np.mean(np.abs(r))), H_plain)


def _levels(view: View, opts: TrackerOptions, prev_view: View | None):
    calib = view.calib
    E = calib.extrinsics_d_to_rgb
    levels = []
    for L in range(opts.levels):
        lv = view.pyramid[min(L, len(view.pyramid) - 1)]
        d = lv.depth
        pts = lv.intrinsics.backproject(d).reshape(-1, 3)
        good = (d.reshape(-1) > 0)
        pts, z = pts[good], d.reshape(-1)[good].astype(np.float64)
        normals = compute_normals(d, lv.intrinsics).reshape(-1, 3)[good] if opts.normal_threshold is not None \
            else np.full_like(pts, np.nan)
        intens = prev = intr_rgb = None
        if opts.use_colour and view.intensity is not None and prev_view is not None \
                and prev_view.intensity is not None:
            intr_rgb = calib.intrinsics_rgb.level(L)
            cur_img = _intensity_level(view, L)
            prev = _intensity_level(prev_view, L)
            u, v, _ = intr_rgb.project(E.apply(pts))
            intens, ok = bilinear(cur_img, u, v)
            intens = np.where(ok, intens, np.nan)
        levels.append(_Level(pts, z, normals, intens, prev, intr_rgb))
    return levels


def _intensity_level(view: View, L: int) -> np.ndarray:
    img = view.intensity.astype(np.float64)
    for _ in range(L):
        img = downsample_image(img).astype(np.float64)
    return img


def _solve(view: View, maps: RenderState, init: Pose, opts: TrackerOptions, prev_view: View | None = None,
           prev_pose: Pose | None = None):
    check_view(view)
    init = check_pose(init)
    if maps.points is None or maps.normals is None or maps.pose is None:
        raise ValueError("render state has no point/normal maps")
    use_colour = opts.use_colour and prev_view is not None and prev_pose is not None
    opts_eff = replace(opts, use_colour=use_colour)
    prev_pose_rgb = view.calib.extrinsics_d_to_rgb @ prev_pose if use_colour else None
    levels = _levels(view, opts_eff, prev_view)
    T = init.inverse()
    summary = TrackerIterationSummary()
    for L in reversed(range(opts.levels)):
        cap = opts.iterations[opts.levels - 1 - L]
        lam = 1e-3
        cur = _evaluate(levels[L], T, maps, opts_eff, prev_pose_rgb)
        for _ in range(cap):
            if cur.n_geo < opts.min_points:
                break
            A = cur.H + lam * np.diag(np.diag(cur.H))
            try:
                delta = np.linalg.solve(A, -cur.g)
            except np.linalg.LinAlgError:
                break
            summary.iterations_run += 1
            T_new = Pose.exp(delta) @ T
            trial = _evaluate(levels[L], T_new, maps, opts_eff, prev_pose_rgb)
            accepted = trial.n_geo >= opts.min_points and trial.energy <= cur.energy
            summary.history.append((trial.energy, accepted))
            if accepted:
                T, cur = T_new, trial
                lam /= 10.0
            else:
                lam *= 10.0
            if np.linalg.norm(delta) < opts.min_step:
                break
    final = _evaluate(levels[0], T, maps, opts_eff, prev_pose_rgb)
    _fill_summary(summary, final, len(levels[0].points))
    if final.n_geo < opts.min_points or summary.hessian_det < opts.det_threshold:
        summary.degenerate = True
        return init, summary
    return T.inverse(), summary


def _fill_summary(summary, ev: _Eval, n_points: int):
    summary.n_points = n_points
    summary.inlier_fraction = ev.n_inliers / n_points if n_points else 0.0
    summary.residual_mean = ev.resid_abs_mean
    summary.hessian_det = float(np.linalg.det(ev.H)) if ev.n_geo else 0.0


def track_depth(view: View, maps: RenderState, init: Pose, opts: TrackerOptions = ICP_OPTIONS):
    """Point-to-plane ICP, coarse to fine. Returns ``(pose_d, summary)``."""
    return _solve(view, maps, init, replace(opts, use_colour=False))


def track_extended(view: View, maps: RenderState, init: Pose, opts: TrackerOptions = EXTENDED_OPTIONS,
                   prev_view: View | None = None, prev_pose: Pose | None = None):
    """Robust, depth-weighted ICP with an optional frame-to-frame photometric term."""
    return _solve(view, maps, init, opts, prev_view, prev_pose)


def tracking_summary(view: View, maps: RenderState, pose: Pose, opts: TrackerOptions = EXTENDED_OPTIONS):
    """Summary features at a fixed pose, without optimising."""
    levels = _levels(view, replace(opts, use_colour=False), None)
    ev = _evaluate(levels[0], pose.inverse(), maps, replace(opts, use_colour=False), None)
    s = TrackerIterationSummary()
    _fill_summary(s, ev, len(levels[0].points))
    return s


# -- colour tracker ----------------------------------------------------------
def colour_residuals(points_world: np.ndarray, colours: np.ndarray, pose_rgb: Pose, image: np.ndarray,
                     intr: Intrinsics):
    """Per-channel differences ``I(pi(M v)) - c`` and their Jacobian w.r.t. a left increment of ``M``.

    Returns ``(r (N,3), J (N,3,6), valid)``; colours in [0, 1].
    """
    x = pose_rgb.apply(points_world)
    u, v, z = intr.project(x)
    front = z > 0
    u = np.where(front, u, -1)
    val, valid, gx, gy = bilinear(image, u, v, with_gradient=True)
    valid &= front
    r = val - colours
    grad = np.stack([gx, gy], axis=2)  # (N, 3, 2)
    J = grad @ _projection_jacobian(np.where(valid[:, None], x, 1.0), intr) @ _point_jacobian(x)
    return r, J, valid


def track_color(view: View, maps: RenderState, init: Pose, levels: int = 3, iterations=(20, 10, 6),
                subsample: int = 4, skip_points: bool = False, min_points: int = 100, min_step: float = 1e-4):
    """Align the rendered coloured surface to the current rgb image by LM.

    Returns ``(pose_d, summary)``; fewer than ``min_points`` usable points
    returns ``init`` with a degenerate summary.
    """
    check_view(view)
    if view.rgb is None or maps.colour is None or maps.colour.ndim != 3:
        raise ValueError("colour tracking needs an rgb view and a colour render")
    step = subsample * (2 if skip_points else 1)
    pts = maps.points.reshape(-1, 3)[::step]
    cols = maps.colour.reshape(-1, 3)[::step].astype(np.float64) / 255.0
    ok = np.isfinite(pts).all(axis=1)
    pts, cols = pts[ok], cols[ok]
    summary = TrackerIterationSummary(n_points=len(pts))
    E = view.calib.extrinsics_d_to_rgb
    images = [view.rgb.astype(np.float64) / 255.0]
    for _ in range(1, levels):
        images.append(downsample_image(images[-1]).astype(np.float64))

    def evaluate(M, L):
        intr = view.calib.intrinsics_rgb.level(L)
        r, J, valid = colour_residuals(pts, cols, E @ M, images[L], intr)
        r, J = r[valid], J[valid]
        n = len(r)
        if n == 0:
            return np.inf, None, None, 0
        Jf = J.reshape(-1, 6)
        rf = r.reshape(-1)
        return 0.5 * float(rf @ rf) / n, Jf.T @ Jf / n, Jf.T @ rf / n, n

    M = check_pose(init)
    for L in reversed(range(levels)):
        lam = 1e-3
        e, H, g, n = evaluate(M, L)
        for _ in range(iterations[levels - 1 - L]):
            if n < min_points:
                break
            try:
                delta = np.linalg.solve(H + lam * np.diag(np.diag(H)), -g)
            except np.linalg.LinAlgError:
                break
            summary.iterations_run += 1
            M_new = Pose.exp(delta) @ M
            e2, H2, g2, n2 = evaluate(M_new, L)
            accepted = n2 >= min_points and e2 <= e
            summary.history.append((e2, accepted))
            if accepted:
                M, e, H, g, n = M_new, e2, H2, g2, n2
                lam /= 10.0
            else:
                lam *= 10.0
            if np.linalg.norm(delta) < min_step:
                break
    e, H, g, n = evaluate(M, 0)
    summary.inlier_fraction = n / max(len(pts), 1)
    summary.residual_mean = float(np.sqrt(2 * e)) if n else np.inf
    summary.hessian_det = float(np.linalg.det(H)) if n else 0.0
    if n < min_points or summary.hessian_det < 1e-12:
        summary.degenerate = True
        return check_pose(init), summary
    return M, summary


# -- quality -----------------------------------------------------------------
@dataclass(frozen=True)
class QualityClassifier:
    """Linear score over (inlier fraction, log10 Hessian determinant, mean residual in metres).

    The defaults are a logistic fit on a synthetic perturbation sweep, so the
    score is the log-odds of a pose within 1 cm and 1 degree of the truth.
    """

    weights: tuple = (2.14, 0.083, -372.0)
    bias: float = 2.28
    poor_threshold: float = -1.0
    good_threshold: float = 0.0

    def score(self, s: TrackerIterationSummary) -> float:
        logdet = np.log10(max(s.hessian_det, 1e-300))
        resid = s.residual_mean if np.isfinite(s.residual_mean) else 1.0
        return float(np.dot(self.weights, (s.inlier_fraction, max(logdet, -30.0), resid)) + self.bias)


def evaluate_tracking_quality(summary: TrackerIterationSummary,
                              classifier: QualityClassifier | None = None) -> Quality:
    classifier = classifier or QualityClassifier()
    if summary.inlier_fraction <= 0 or summary.degenerate:
        return Quality.FAILED
    sc = classifier.score(summary)
    if sc < classifier.poor_threshold:
        return Quality.FAILED
    if sc < classifier.good_threshold:
        return Quality.POOR
    return Quality.GOOD


# -- estimator wrappers ------------------------------------------------------
class _TrackerBase(BaseEstimator):
    def fit(self, render_state: RenderState, y=None):
        """Store the model maps to track against."""
        if render_state.points is None:
            raise ValueError("render state has no point map")
        self.maps_ = render_state
        return self

    def _options(self) -> TrackerOptions:
        return TrackerOptions(levels=self.levels, iterations=tuple(self.iterations))


class ICPTracker(_TrackerBase):
    def __init__(self, levels=3, iterations=(20, 10, 6), normal_threshold=NORMAL_GATE):
        self.levels = levels
        self.iterations = iterations
        self.normal_threshold = normal_threshold

    def _options(self):
        return TrackerOptions(levels=self.levels, iterations=tuple(self.iterations),
                              normal_threshold=self.normal_threshold)

    def predict(self, view, init_pose):
        pose, self.summary_ = track_depth(view, self.maps_, init_pose, self._options())
        return pose


class ExtendedTracker(_TrackerBase):
    def __init__(self, levels=3, iterations=(20, 10, 6), huber_delta=0.01, depth_weighting=True,
                 outlier_threshold=0.04, normal_threshold=NORMAL_GATE, use_colour=False, colour_weight=0.3,
                 tukey_c=0.25):
        self.levels = levels
        self.iterations = iterations
        self.huber_delta = huber_delta
        self.depth_weighting = depth_weighting
        self.outlier_threshold = outlier_threshold
        self.normal_threshold = normal_threshold
        self.use_colour = use_colour
        self.colour_weight = colour_weight
        self.tukey_c = tukey_c

    def _options(self):
        return TrackerOptions(self.levels, tuple(self.iterations), self.huber_delta, self.depth_weighting,
                              self.outlier_threshold, self.normal_threshold, self.use_colour,
                              self.colour_weight, self.tukey_c)

    def predict(self, view, init_pose, prev_view=None, prev_pose=None):
        pose, self.summary_ = track_extended(view, self.maps_, init_pose, self._options(), prev_view, prev_pose)
        return pose


class ColourTracker(_TrackerBase):
    def __init__(self, levels=3, iterations=(20, 10, 6), subsample=4, skip_points=False):
        self.levels = levels
        self.iterations = iterations
        self.subsample = subsample
        self.skip_points = skip_points

    def predict(self, view, init_pose):
        pose, self.summary_ = track_color(view, self.maps_, init_pose, self.levels, self.iterations,
                                          self.subsample, self.skip_points)
        return pose
