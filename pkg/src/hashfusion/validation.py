"""Input checks shared by the estimator wrappers."""
from __future__ import annotations

import numpy as np

from .core import Intrinsics, Pose, View


def check_pose(pose) -> Pose:
    if isinstance(pose, Pose):
        return pose
    m = np.asarray(pose, dtype=float)
    if m.shape not in ((4, 4), (3, 4)):
        raise TypeError(f"expected a Pose or a 4x4/3x4 matrix, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise ValueError("pose contains non-finite values")
    return Pose.from_matrix(m)


def check_intrinsics(intrinsics) -> Intrinsics:
    if not isinstance(intrinsics, Intrinsics):
        raise TypeError(f"expected Intrinsics, got {type(intrinsics).__name__}")
    return intrinsics


def check_depth(depth, shape=None) -> np.ndarray:
    d = np.asarray(depth)
    if d.ndim != 2:
        raise ValueError(f"depth image must be 2-D, got shape {d.shape}")
    if shape is not None and d.shape != tuple(shape):
        raise ValueError(f"depth image is {d.shape}, expected {tuple(shape)}")
    return d


def check_view(view) -> View:
    if not isinstance(view, View):
        raise TypeError(f"expected a View, got {type(view).__name__}")
    check_depth(view.depth_m, view.intrinsics.shape)
    if not view.pyramid:
        raise ValueError("view has no pyramid; build it with build_view")
    return view
