"""Mesh, point-cloud and trajectory files."""
from __future__ import annotations

import struct

import numpy as np

from ..core import Pose
from ..voxelmap import Mesh


def write_mesh(mesh: Mesh, path, format: str | None = None):
    fmt = (format or str(path).rsplit(".", 1)[-1]).lower()
    if fmt == "obj":
        _write_obj(mesh, path)
    elif fmt == "stl":
        _write_stl(mesh, path)
    else:
        raise ValueError(f"unknown mesh format {fmt!r}")


def _write_obj(mesh: Mesh, path):
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for f in np.asarray(mesh.faces) + 1:
            fh.write(f"f {f[0]} {f[1]} {f[2]}\n")


def read_obj(path) -> Mesh:
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return Mesh(np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def _write_stl(mesh: Mesh, path):
    v = np.asarray(mesh.vertices, dtype=np.float64)
    f = np.asarray(mesh.faces)
    with open(path, "wb") as fh:
        fh.write(b"\0" * 80)
        fh.write(struct.pack("<I", len(f)))
        if len(f):
            a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
            n = np.cross(b - a, c - a)
            ln = np.linalg.norm(n, axis=1, keepdims=True)
            n = np.divide(n, ln, out=np.zeros_like(n), where=ln > 0)
            rec = np.zeros(len(f), dtype=[("n", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")])
            rec["n"] = n
            rec["v"] = np.stack([a, b, c], axis=1)
            fh.write(rec.tobytes())


def write_point_cloud(path, positions, normals, radii, confidences, colours=None):
    """One surfel per line: ``x y z nx ny nz radius confidence r g b``."""
    n = len(positions)
    colours = np.zeros((n, 3), dtype=np.uint8) if colours is None else colours
    with open(path, "w") as fh:
        fh.write("# x y z nx ny nz radius confidence r g b\n")
        for p, nm, r, c, col in zip(positions, normals, radii, confidences, colours):
            fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {nm[0]:.6f} {nm[1]:.6f} {nm[2]:.6f} "
                     f"{r:.6f} {c:.6f} {int(col[0])} {int(col[1])} {int(col[2])}\n")


def write_trajectory(path, timestamps, poses: list[Pose]):
    """TUM format ``timestamp tx ty tz qx qy qz qw`` of camera-to-world poses."""
    with open(path, "w") as fh:
        for ts, p in zip(timestamps, poses):
            q = p.quaternion()
            t = p.translation
            fh.write(f"{ts:.6f} {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} {q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}\n")


def read_trajectory(path) -> tuple[list[float], list[Pose]]:
    stamps, poses = [], []
    with open(path) as fh:
        for line in fh:
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            vals = [float(x) for x in line.split()]
            stamps.append(vals[0])
            poses.append(Pose.from_quaternion(vals[1:4], vals[4:8]))
    return stamps, poses
