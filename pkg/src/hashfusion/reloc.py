"""Keyframe relocalisation with random ferns.

An RGB-D image, shrunk to a small fixed size, is encoded by ``m`` ferns of
``n`` binary pixel tests each. Keyframes are indexed by one code table per
fern; a query is compared with every keyframe that shares at least one code
block with it.

Saved state layout (little-endian)::

    magic b"HFFERNS\\0", u32 version
    i64 seed, u32 m, u32 n, u32 width, u32 height
    m*n x (i32 x, i32 y, u8 channel, f32 threshold)
    u32 keyframe count K, K x 12 f64 poses (3x4 row-major, world-to-camera)
    K x m u16 codes
    for each fern, for each of the 2**n codes: u32 count, count x u32 keyframe ids
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .core import Pose

MAGIC = b"HFFERNS\0"
VERSION = 1
CHANNEL_DEPTH, CHANNEL_R, CHANNEL_G, CHANNEL_B = 0, 1, 2, 3


def _area_resize(img: np.ndarray, width: int, height: int, valid=None) -> np.ndarray:
    """Area-average resize; with ``valid`` only valid pixels contribute."""
    H, W = img.shape[:2]
    ys = np.linspace(0, H, height + 1).astype(np.int64)[:-1]
    xs = np.linspace(0, W, width + 1).astype(np.int64)[:-1]
    x = img.astype(np.float64)
    if valid is None:
        valid = np.ones(img.shape[:2], dtype=bool)
    if x.ndim == 3:
        wmask = valid[..., None].astype(np.float64)
    else:
        wmask = valid.astype(np.float64)
    s = np.add.reduceat(np.add.reduceat(x * wmask, ys, axis=0), xs, axis=1)
    c = np.add.reduceat(np.add.reduceat(wmask, ys, axis=0), xs, axis=1)
    return np.where(c > 0, s / np.maximum(c, 1e-300), np.nan)


def prepare_image(depth_m: np.ndarray, rgb: np.ndarray | None, width: int = 40, height: int = 30) -> np.ndarray:
    """Shrink an RGB-D frame to ``(height, width, 4)``: depth in metres (-1 invalid), then r, g, b."""
    depth = np.asarray(depth_m, dtype=np.float64)
    d = _area_resize(depth, width, height, depth > 0)
    out = np.zeros((height, width, 4))
    out[..., 0] = np.where(np.isfinite(d), d, -1.0)
    if rgb is not None:
        out[..., 1:] = _area_resize(np.asarray(rgb), width, height)
    return out


@dataclass
class FernConservatory:
    """Fixed random tests: for fern ``k`` and test ``j``, pixel ``(x[k,j], y[k,j])`` of ``channel[k,j]``."""

    x: np.ndarray
    y: np.ndarray
    channel: np.ndarray
    threshold: np.ndarray
    width: int
    height: int
    seed: int = 0

    @classmethod
    def generate(cls, m: int = 500, n: int = 4, width: int = 40, height: int = 30, seed: int = 0,
                 depth_range=(0.3, 3.0), use_colour: bool = True) -> FernConservatory:
        if not 1 <= n <= 16:
            raise ValueError("tests per fern must be in [1, 16]")
        rng = np.random.default_rng(seed)
        x = rng.integers(0, width, size=(m, n)).astype(np.int32)
        y = rng.integers(0, height, size=(m, n)).astype(np.int32)
        channel = rng.integers(0, 4 if use_colour else 1, size=(m, n)).astype(np.uint8)
        thr = np.where(channel == CHANNEL_DEPTH, rng.uniform(*depth_range, size=(m, n)),
                       rng.uniform(0, 255, size=(m, n)))
        return cls(x, y, channel, thr.astype(np.float32), width, height, seed)

    @property
    def m(self) -> int:
        return self.x.shape[0]

    @property
    def n(self) -> int:
        return self.x.shape[1]

    def compute_code(self, image: np.ndarray) -> np.ndarray:
        """Code block per fern, bit ``j`` set when the tested value exceeds its threshold."""
        image = np.asarray(image)
        if image.shape != (self.height, self.width, 4):
            raise ValueError(f"expected a {self.width}x{self.height}x4 image, got {image.shape}")
        vals = image[self.y, self.x, self.channel]
        bits = (vals > self.threshold).astype(np.int64)
        return (bits << np.arange(self.n)).sum(axis=1).astype(np.uint16)


def block_hd(a, b) -> float:
    """Fraction of code blocks that differ."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"code vectors must have equal 1-D shapes, got {a.shape} and {b.shape}")
    return float(np.count_nonzero(a != b)) / a.size


@dataclass
class Candidate:
    keyframe: int
    dissimilarity: float
    pose: Pose


@dataclass
class FrameResult:
    added: bool
    candidates: list


class RelocDatabase:
    """One table per fern from code to keyframe ids, plus keyframe poses."""

    def __init__(self, m: int, n: int):
        self.m, self.n = m, n
        self.tables = [[[] for _ in range(2 ** n)] for _ in range(m)]
        self.poses: list[Pose] = []
        self.codes: list[np.ndarray] = []

    @property
    def entry_count(self) -> int:
        return len(self.poses)

    def add(self, code: np.ndarray, pose: Pose) -> int:
        kid = len(self.poses)
        for k, c in enumerate(code):
            self.tables[k][int(c)].append(kid)
        self.poses.append(pose)
        self.codes.append(np.asarray(code, dtype=np.uint16).copy())
        return kid

    def dissimilarities(self, code: np.ndarray) -> dict[int, float]:
        """Keyframes sharing at least one block with ``code``, and their dissimilarity."""
        shared = np.zeros(self.entry_count, dtype=np.int64)
        for k, c in enumerate(code):
            ids = self.tables[k][int(c)]
            if ids:
                np.add.at(shared, ids, 1)
        hit = np.flatnonzero(shared)
        return {int(i): float(self.m - shared[i]) / self.m for i in hit}

    def ranked(self, code: np.ndarray) -> list[tuple[int, float]]:
        d = self.dissimilarities(code)
        return sorted(d.items(), key=lambda kv: (kv[1], kv[0]))


class Relocaliser:
    def __init__(self, conservatory: FernConservatory, harvest_threshold: float = 0.2, n_candidates: int = 4):
        self.ferns = conservatory
        self.db = RelocDatabase(conservatory.m, conservatory.n)
        self.harvest_threshold = harvest_threshold
        self.n_candidates = n_candidates

    def process_frame(self, image: np.ndarray, pose: Pose | None = None, mode: str = "train") -> FrameResult:
        """Train: harvest the image as a keyframe if it is novel enough. Relocalise: rank keyframes."""
        if mode not in ("train", "relocalise"):
            raise ValueError(f"unknown mode {mode!r}")
        code = self.ferns.compute_code(image)
        ranked = self.db.ranked(code)
        if mode == "train":
            if pose is None:
                raise ValueError("training needs a known pose")
            best = ranked[0][1] if ranked else 1.0
            added = self.db.entry_count == 0 or best > self.harvest_threshold
            if added:
                self.db.add(code, pose)
            return FrameResult(added, [])
        cands = [Candidate(i, d, self.db.poses[i]) for i, d in ranked[:self.n_candidates]]
        return FrameResult(False, cands)

    # -- persistence -------------------------------------------------------
    def save(self, path):
        f = self.ferns
        with open(path, "wb") as fh:
            fh.write(MAGIC + struct.pack("<I", VERSION))
            fh.write(struct.pack("<qIIII", f.seed, f.m, f.n, f.width, f.height))
            tests = np.zeros(f.m * f.n, dtype=[("x", "<i4"), ("y", "<i4"), ("c", "u1"), ("t", "<f4")])
            tests["x"], tests["y"] = f.x.ravel(), f.y.ravel()
            tests["c"], tests["t"] = f.channel.ravel(), f.threshold.ravel()
            fh.write(tests.tobytes())
            fh.write(struct.pack("<I", self.db.entry_count))
            for p in self.db.poses:
                fh.write(np.asarray(p.matrix[:3], dtype="<f8").tobytes())
            for c in self.db.codes:
                fh.write(c.astype("<u2").tobytes())
            for table in self.db.tables:
                for ids in table:
                    fh.write(struct.pack("<I", len(ids)))
                    fh.write(np.asarray(ids, dtype="<u4").tobytes())

    @classmethod
    def load(cls, path, harvest_threshold: float = 0.2, n_candidates: int = 4) -> Relocaliser:
        with open(path, "rb") as fh:
            data = fh.read()
        if data[:8] != MAGIC:
            raise ValueError(f"{path}: not a fern relocaliser file")
        (version,) = struct.unpack_from("<I", data, 8)
        if version != VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        pos = 12
        seed, m, n, width, height = struct.unpack_from("<qIIII", data, pos)
        pos += struct.calcsize("<qIIII")
        tdt = np.dtype([("x", "<i4"), ("y", "<i4"), ("c", "u1"), ("t", "<f4")])
        tests = np.frombuffer(data, dtype=tdt, count=m * n, offset=pos)
        pos += tdt.itemsize * m * n
        ferns = FernConservatory(tests["x"].reshape(m, n).astype(np.int32), tests["y"].reshape(m, n).astype(np.int32),
                                 tests["c"].reshape(m, n).astype(np.uint8), tests["t"].reshape(m, n).astype(np.float32),
                                 width, height, seed)
        rel = cls(ferns, harvest_threshold, n_candidates)
        (k,) = struct.unpack_from("<I", data, pos)
        pos += 4
        mats = np.frombuffer(data, dtype="<f8", count=12 * k, offset=pos).reshape(k, 3, 4)
        pos += 96 * k
        codes = np.frombuffer(data, dtype="<u2", count=k * m, offset=pos).reshape(k, m)
        pos += 2 * k * m
        rel.db.poses = [Pose(M[:, :3], M[:, 3]) for M in mats]
        rel.db.codes = [c.astype(np.uint16) for c in codes]
        for table in rel.db.tables:
            for c in range(2 ** n):
                (cnt,) = struct.unpack_from("<I", data, pos)
                pos += 4
                table[c] = np.frombuffer(data, dtype="<u4", count=cnt, offset=pos).astype(int).tolist()
                pos += 4 * cnt
        return rel


class FernRelocaliser(BaseEstimator):
    """Estimator view: ``fit`` harvests keyframes, ``predict`` returns the best candidate pose."""

    def __init__(self, n_ferns=500, tests_per_fern=4, width=40, height=30, harvest_threshold=0.2,
                 n_candidates=4, random_state=0):
        self.n_ferns = n_ferns
        self.tests_per_fern = tests_per_fern
        self.width = width
        self.height = height
        self.harvest_threshold = harvest_threshold
        self.n_candidates = n_candidates
        self.random_state = random_state

    def _new(self) -> Relocaliser:
        ferns = FernConservatory.generate(self.n_ferns, self.tests_per_fern, self.width, self.height,
                                          self.random_state)
        return Relocaliser(ferns, self.harvest_threshold, self.n_candidates)

    def fit(self, images, poses):
        self.reloc_ = self._new()
        return self.partial_fit(images, poses)

    def partial_fit(self, images, poses):
        if not hasattr(self, "reloc_"):
            self.reloc_ = self._new()
        self.added_ = [self.reloc_.process_frame(im, p, "train").added for im, p in zip(images, poses)]
        return self

    def transform(self, images) -> np.ndarray:
        """Fern codes, one row per image."""
        return np.stack([self.reloc_.ferns.compute_code(im) for im in images])

    def kneighbors(self, image) -> list[Candidate]:
        return self.reloc_.process_frame(image, mode="relocalise").candidates

    def predict(self, images) -> list[Pose | None]:
        out = []
        for im in images:
            c = self.kneighbors(im)
            out.append(c[0].pose if c else None)
        return out
