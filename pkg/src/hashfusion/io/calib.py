"""Calibration text files.

Layout (whitespace separated, blank lines optional)::

    <rgb width> <rgb height>
    <rgb fx> <rgb fy>
    <rgb cx> <rgb cy>

    <depth width> <depth height>
    <depth fx> <depth fy>
    <depth cx> <depth cy>

    <3x4 depth-to-rgb extrinsic, one row per line>

    <depth scale> <depth offset>
"""
from __future__ import annotations

import numpy as np

from ..core import Intrinsics, Pose, RgbdCalib

_SECTIONS = [
    ("rgb image size", 2), ("rgb focal length", 2), ("rgb principal point", 2),
    ("depth image size", 2), ("depth focal length", 2), ("depth principal point", 2),
    ("extrinsic row 1", 4), ("extrinsic row 2", 4), ("extrinsic row 3", 4),
    ("depth calibration", 2),
]


class CalibrationError(ValueError):
    pass


def parse_calibration(text: str, depth_conversion: str = "affine") -> RgbdCalib:
    lines = [(i + 1, ln.split()) for i, ln in enumerate(text.splitlines()) if ln.strip()]
    values = []
    for k, (name, count) in enumerate(_SECTIONS):
        if k >= len(lines):
            raise CalibrationError(f"calibration truncated: missing {name}")
        lineno, tokens = lines[k]
        if len(tokens) != count:
            raise CalibrationError(f"line {lineno}: expected {count} values for {name}, got {len(tokens)}")
        try:
            values.append([float(t) for t in tokens])
        except ValueError:
            raise CalibrationError(f"line {lineno}: non-numeric value in {name}") from None
    if len(lines) > len(_SECTIONS):
        raise CalibrationError(f"line {lines[len(_SECTIONS)][0]}: unexpected trailing content")

    def intrinsics(size, focal, pp):
        if size[0] != int(size[0]) or size[1] != int(size[1]):
            raise CalibrationError("image size must be integral")
        return Intrinsics(int(size[0]), int(size[1]), focal[0], focal[1], pp[0], pp[1])

    rgb = intrinsics(*values[0:3])
    depth = intrinsics(*values[3:6])
    ext = np.array(values[6:9])
    # the example extrinsics are orthonormal only to ~1e-5; re-orthonormalise
    u, _, vt = np.linalg.svd(ext[:, :3])
    R = u @ vt
    pose = Pose(R, ext[:, 3])
    return RgbdCalib(rgb, depth, pose, (values[9][0], values[9][1]), depth_conversion, ext)


def load_calibration(path, depth_conversion: str = "affine") -> RgbdCalib:
    with open(path) as fh:
        return parse_calibration(fh.read(), depth_conversion)


def render_calibration(calib: RgbdCalib) -> str:
    """Inverse of :func:`parse_calibration` (floats written round-trip exact)."""
    def cam(c: Intrinsics):
        return f"{c.width} {c.height}\n{c.fx!r} {c.fy!r}\n{c.cx!r} {c.cy!r}\n"

    ext = extrinsic_matrix(calib)
    rows = "\n".join(" ".join(repr(float(v)) for v in row) for row in ext)
    s, o = calib.depth_affine
    return f"{cam(calib.intrinsics_rgb)}\n{cam(calib.intrinsics_d)}\n{rows}\n\n{float(s)!r} {float(o)!r}\n"


def extrinsic_matrix(calib: RgbdCalib) -> np.ndarray:
    """The 3x4 extrinsic block exactly as read from file."""
    if calib.extrinsics_raw is not None:
        return np.array(calib.extrinsics_raw, dtype=float)
    return np.hstack([calib.extrinsics_d_to_rgb.rotation, calib.extrinsics_d_to_rgb.translation[:, None]])
