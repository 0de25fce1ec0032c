"""Hashed TSDF storage: voxel block array, hash table, lookups and meshing.

Blocks are 8x8x8 voxels addressed by integer block coordinates. The hash
table has ``bucket_count`` ordered single-entry buckets followed by
``excess_count`` overflow entries chained through ``offset`` (an offset
``k >= 1`` links to overflow slot ``k - 1``).

Entry pointer semantics: ``ptr >= 0`` is a block in the voxel block array,
``ptr == -1`` marks a block swapped out to the host tier, ``ptr < -1`` is an
unused entry.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BLOCK_SIZE = 8
BLOCK_VOXELS = BLOCK_SIZE ** 3
SDF_SCALE = 32767
PTR_SWAPPED = -1
PTR_UNUSED = -2

HASH_PRIMES = (73856093, 19349669, 83492791)
_U32 = 0xFFFFFFFF

# visibility codes
INVISIBLE, VISIBLE_IN_MEMORY, VISIBLE_SWAPPED, VISIBLE_BOUNDARY = 0, 1, 2, 3


class AllocationError(RuntimeError):
    """The voxel block array or the excess list is exhausted."""


def hash_index(block_pos, hash_mask: int = 2 ** 20 - 1):
    """Bucket index of one block position or an ``(N, 3)`` array of them.

    Coordinates are reinterpreted as unsigned 32-bit values and the products
    wrap modulo 2**32.
    """
    p = np.asarray(block_pos, dtype=np.int64) & _U32
    h = ((p[..., 0] * HASH_PRIMES[0]) & _U32) ^ ((p[..., 1] * HASH_PRIMES[1]) & _U32) \
        ^ ((p[..., 2] * HASH_PRIMES[2]) & _U32)
    h = h & hash_mask
    return int(h) if h.ndim == 0 else h


def sdf_to_stored(sdf):
    return np.clip(np.rint(np.asarray(sdf, dtype=np.float64) * SDF_SCALE), -SDF_SCALE, SDF_SCALE).astype(np.int16)


def stored_to_sdf(stored):
    return np.asarray(stored, dtype=np.float64) / SDF_SCALE


@dataclass
class Voxel:
    sdf: float = 1.0
    w_depth: int = 0
    clr: tuple[int, int, int] = (0, 0, 0)
    w_color: int = 0


@dataclass
class BlockCache:
    """Last block hit by :meth:`VoxelBlockMap.find_voxel`."""

    block_pos: tuple[int, int, int] | None = None
    block_ptr: int = -1


@dataclass
class Mesh:
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    @property
    def n_triangles(self) -> int:
        return len(self.faces)


def _local_index(local):
    return local[..., 0] + BLOCK_SIZE * local[..., 1] + BLOCK_SIZE * BLOCK_SIZE * local[..., 2]


class _Sampler:
    """Voxel reads shared by the hash map and its sorted snapshot.

    Subclasses provide ``block_ptrs`` and the ``sdf``/``w_depth``/``clr`` arrays.
    """

    def voxel_ptrs(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Block pointer (or -1) and in-block index for integer voxel points."""
        p = np.asarray(points, dtype=np.int64).reshape(-1, 3)
        bp = np.floor_divide(p, BLOCK_SIZE)
        return self.block_ptrs(bp), _local_index(p - BLOCK_SIZE * bp)

    def read_voxels(self, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorised lookup: ``(sdf, w_depth, found)``; misses read as fresh voxels."""
        ptr, li = self.voxel_ptrs(points)
        found = ptr >= 0
        sdf = np.ones(len(ptr))
        w = np.zeros(len(ptr), dtype=np.int64)
        sdf[found] = stored_to_sdf(self.sdf[ptr[found], li[found]])
        w[found] = self.w_depth[ptr[found], li[found]]
        return sdf, w, found

    def is_allocated(self, points) -> np.ndarray:
        """Whether the block containing each (float) voxel point is resident."""
        bp = np.floor_divide(np.floor(np.asarray(points, dtype=np.float64)).astype(np.int64), BLOCK_SIZE)
        return self.block_ptrs(bp.reshape(-1, 3)) >= 0

    def sample(self, points, with_weight: bool = False, with_colour: bool = False):
        """Trilinear sdf at float voxel coordinates.

        Returns ``(sdf, valid[, weight][, colour])``; ``valid`` is false when
        any of the eight neighbouring voxels lies outside a resident block.
        """
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        base = np.floor(p)
        frac = p - base
        base = base.astype(np.int64)
        offsets = np.array([[i, j, k] for k in (0, 1) for j in (0, 1) for i in (0, 1)])
        corners = (base[:, None, :] + offsets[None]).reshape(-1, 3)
        ptr, li = self.voxel_ptrs(corners)
        found = ptr >= 0
        vals = np.ones(len(ptr))
        vals[found] = stored_to_sdf(self.sdf[ptr[found], li[found]])
        vals = vals.reshape(-1, 8)
        found = found.reshape(-1, 8)
        fx, fy, fz = frac[:, 0:1], frac[:, 1:2], frac[:, 2:3]
        wx = np.where(offsets[:, 0] == 1, fx, 1 - fx)
        wy = np.where(offsets[:, 1] == 1, fy, 1 - fy)
        wz = np.where(offsets[:, 2] == 1, fz, 1 - fz)
        tw = wx * wy * wz
        out = [(tw * vals).sum(axis=1), found.all(axis=1)]
        if with_weight:
            w = np.zeros(len(ptr))
            fl = found.ravel()
            w[fl] = self.w_depth[ptr[fl], li[fl]]
            out.append((tw * w.reshape(-1, 8)).sum(axis=1))
        if with_colour:
            c = np.zeros((len(ptr), 3))
            fl = found.ravel()
            c[fl] = self.clr[ptr[fl], li[fl]]
            out.append((tw[..., None] * c.reshape(-1, 8, 3)).sum(axis=1))
        return tuple(out)

    def read_sdf_trilinear(self, p) -> tuple[float, bool]:
        sdf, valid = self.sample(np.asarray(p, dtype=np.float64)[None])
        return float(sdf[0]), bool(valid[0])

    def probe(self, points) -> tuple[np.ndarray, np.ndarray]:
        """sdf for ray marching: ``(sdf, allocated)``.

        Trilinear where all eight neighbours are resident, otherwise the
        nearest voxel; 1 where the containing block is not resident.
        """
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        sdf, valid = self.sample(p)
        ptr, li = self.voxel_ptrs(np.floor(p))
        alloc = ptr >= 0
        fallback = alloc & ~valid
        if fallback.any():
            nptr, nli = self.voxel_ptrs(np.floor(p[fallback] + 0.5))
            near = np.ones(len(nptr))
            ok = nptr >= 0
            near[ok] = stored_to_sdf(self.sdf[nptr[ok], nli[ok]])
            sdf[fallback] = near
        sdf[~alloc] = 1.0
        return sdf, alloc


class VoxelBlockMap(_Sampler):
    """Voxel-block-hashed TSDF.

    Parameters
    ----------
    voxel_size : float
        Voxel edge length in metres.
    bucket_count : int
        Ordered buckets; must be a power of two.
    excess_count : int
        Overflow entries.
    block_capacity : int
        Maximum number of resident blocks. Storage grows on demand up to it.
    """

    def __init__(self, voxel_size: float = 0.005, bucket_count: int = 2 ** 20,
                 excess_count: int = 2 ** 17, block_capacity: int = 2 ** 18):
        if bucket_count & (bucket_count - 1):
            raise ValueError("bucket_count must be a power of two")
        self.voxel_size = float(voxel_size)
        self.bucket_count = bucket_count
        self.hash_mask = bucket_count - 1
        self.excess_count = excess_count
        self.block_capacity = block_capacity
        n = bucket_count + excess_count
        self.entry_pos = np.zeros((n, 3), dtype=np.int32)
        self.entry_offset = np.zeros(n, dtype=np.int32)
        self.entry_ptr = np.full(n, PTR_UNUSED, dtype=np.int32)
        # stacks pop from the end; lowest indices come out first
        self.free_blocks = np.arange(block_capacity, dtype=np.int32)[::-1].copy()
        self.n_free_blocks = block_capacity
        self.free_excess = np.arange(excess_count, dtype=np.int32)[::-1].copy()
        self.n_free_excess = excess_count
        self.visibility = np.zeros(n, dtype=np.uint8)
        self.visible_entries = np.zeros(0, dtype=np.int64)
        # swapped-out blocks near the view, brought back ahead of integration
        self.prefetch_entries = np.zeros(0, dtype=np.int64)
        self.sdf = np.zeros((0, BLOCK_VOXELS), dtype=np.int16)
        self.w_depth = np.zeros((0, BLOCK_VOXELS), dtype=np.uint8)
        self.clr = np.zeros((0, BLOCK_VOXELS, 3), dtype=np.uint8)
        self.w_color = np.zeros((0, BLOCK_VOXELS), dtype=np.uint8)

    # -- storage -------------------------------------------------------
    @property
    def n_entries(self) -> int:
        return len(self.entry_ptr)

    @property
    def n_allocated_blocks(self) -> int:
        return self.block_capacity - self.n_free_blocks

    def _ensure_storage(self, ptr: int):
        if ptr < len(self.sdf):
            return
        new = min(self.block_capacity, max(ptr + 1, 2 * len(self.sdf), 256))
        grow = new - len(self.sdf)
        self.sdf = np.concatenate([self.sdf, np.full((grow, BLOCK_VOXELS), SDF_SCALE, np.int16)])
        self.w_depth = np.concatenate([self.w_depth, np.zeros((grow, BLOCK_VOXELS), np.uint8)])
        self.clr = np.concatenate([self.clr, np.zeros((grow, BLOCK_VOXELS, 3), np.uint8)])
        self.w_color = np.concatenate([self.w_color, np.zeros((grow, BLOCK_VOXELS), np.uint8)])

    def reset_block(self, ptr: int):
        self.sdf[ptr] = SDF_SCALE
        self.w_depth[ptr] = 0
        self.clr[ptr] = 0
        self.w_color[ptr] = 0

    def pop_block(self) -> int:
        if self.n_free_blocks == 0:
            raise AllocationError("voxel block array exhausted")
        self.n_free_blocks -= 1
        ptr = int(self.free_blocks[self.n_free_blocks])
        self._ensure_storage(ptr)
        self.reset_block(ptr)
        return ptr

    def push_block(self, ptr: int):
        self.free_blocks[self.n_free_blocks] = ptr
        self.n_free_blocks += 1

    # -- hash table ----------------------------------------------------
    def find_entries(self, block_pos, min_ptr: int = 0) -> np.ndarray:
        """Entry index for each block position, or -1.

        ``min_ptr=0`` finds resident blocks only (retrieval semantics);
        ``min_ptr=-1`` also finds swapped-out entries.
        """
        bp = np.asarray(block_pos, dtype=np.int64).reshape(-1, 3)
        idx = hash_index(bp, self.hash_mask).astype(np.int64)
        result = np.full(len(bp), -1, dtype=np.int64)
        active = np.arange(len(bp))
        for _ in range(self.excess_count + 1):
            if active.size == 0:
                break
            e = idx[active]
            match = (self.entry_pos[e] == bp[active]).all(axis=1) & (self.entry_ptr[e] >= min_ptr)
            result[active[match]] = e[match]
            off = self.entry_offset[e]
            cont = ~match & (off >= 1)
            active = active[cont]
            idx[active] = self.bucket_count + off[cont] - 1
        return result

    def find_entry(self, block_pos, min_ptr: int = 0) -> int:
        return int(self.find_entries([block_pos], min_ptr)[0])

    def insertion_targets(self, block_pos) -> tuple[np.ndarray, np.ndarray]:
        """Where each (not yet present) block would be inserted.

        Returns ``(kind, entry)``: kind 1 means the free bucket ``entry``,
        kind 2 means a new excess slot linked from chain tail ``entry``.
        """
        bp = np.asarray(block_pos, dtype=np.int64).reshape(-1, 3)
        idx = hash_index(bp, self.hash_mask).astype(np.int64)
        kind = np.where(self.entry_ptr[idx] < PTR_SWAPPED, 1, 2).astype(np.int8)
        active = np.flatnonzero(kind == 2)
        for _ in range(self.excess_count + 1):
            if active.size == 0:
                break
            off = self.entry_offset[idx[active]]
            cont = off >= 1
            active = active[cont]
            idx[active] = self.bucket_count + off[cont] - 1
        return kind, idx

    def commit_insertion(self, kind: int, entry: int, block_pos) -> int:
        """Perform one insertion prepared by :meth:`insertion_targets`."""
        if self.n_free_blocks == 0:
            raise AllocationError("voxel block array exhausted")
        if kind == 2 and self.n_free_excess == 0:
            raise AllocationError("excess list exhausted")
        if kind == 1:
            new = entry
        else:
            self.n_free_excess -= 1
            slot = int(self.free_excess[self.n_free_excess])
            new = self.bucket_count + slot
            self.entry_offset[new] = 0
            self.entry_offset[entry] = slot + 1
        self.entry_pos[new] = block_pos
        self.entry_ptr[new] = self.pop_block()
        return int(new)

    def allocate_block(self, block_pos) -> int:
        """Insert a block, returning its entry index.

        Already present blocks (resident or swapped out) return their
        existing entry. Raises :class:`AllocationError` with the map
        unchanged when storage runs out.
        """
        e = self.find_entry(block_pos, min_ptr=PTR_SWAPPED)
        if e >= 0:
            return e
        kind, idx = self.insertion_targets([block_pos])
        return self.commit_insertion(int(kind[0]), int(idx[0]), block_pos)

    def allocated_entries(self, min_ptr: int = 0) -> np.ndarray:
        return np.flatnonzero(self.entry_ptr >= min_ptr)

    def chain_length(self, bucket: int) -> int:
        """Entries reachable from ``bucket``; raises if the walk does not terminate."""
        n, idx = 1, bucket
        while self.entry_offset[idx] >= 1:
            idx = self.bucket_count + self.entry_offset[idx] - 1
            n += 1
            if n > self.excess_count + 1:
                raise RuntimeError(f"cycle in hash chain from bucket {bucket}")
        return n

    # -- voxel access --------------------------------------------------
    def find_voxel(self, point, cache: BlockCache | None = None) -> tuple[Voxel, bool]:
        p = np.asarray(point, dtype=np.int64)
        bp = tuple(int(c) for c in np.floor_divide(p, BLOCK_SIZE))
        li = int(_local_index(p - BLOCK_SIZE * np.array(bp)))
        if cache is not None and cache.block_pos == bp:
            return self._voxel_at(cache.block_ptr, li), True
        e = self.find_entry(bp)
        if e < 0:
            return Voxel(), False
        ptr = int(self.entry_ptr[e])
        if cache is not None:
            cache.block_pos, cache.block_ptr = bp, ptr
        return self._voxel_at(ptr, li), True

    def _voxel_at(self, ptr: int, li: int) -> Voxel:
        return Voxel(float(stored_to_sdf(self.sdf[ptr, li])), int(self.w_depth[ptr, li]),
                     tuple(int(c) for c in self.clr[ptr, li]), int(self.w_color[ptr, li]))

    def write_voxel(self, point, voxel: Voxel):
        p = np.asarray(point, dtype=np.int64)
        bp = np.floor_divide(p, BLOCK_SIZE)
        e = self.find_entry(bp)
        if e < 0:
            raise KeyError(f"block {tuple(bp)} is not resident")
        ptr, li = self.entry_ptr[e], _local_index(p - BLOCK_SIZE * bp)
        self.sdf[ptr, li] = sdf_to_stored(voxel.sdf)
        self.w_depth[ptr, li] = voxel.w_depth
        self.clr[ptr, li] = voxel.clr
        self.w_color[ptr, li] = voxel.w_color

    def block_ptrs(self, block_pos) -> np.ndarray:
        """Voxel block array index of each resident block, or -1."""
        e = self.find_entries(block_pos)
        return np.where(e >= 0, self.entry_ptr[np.maximum(e, 0)], -1)

    def index(self) -> BlockIndex:
        return BlockIndex(self)

    # -- block geometry --------------------------------------------------
    def block_voxel_coords(self, entries) -> np.ndarray:
        """Integer voxel coordinates of all voxels of the given entries, ``(E, 512, 3)``."""
        z, y, x = np.meshgrid(np.arange(8), np.arange(8), np.arange(8), indexing="ij")
        local = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)
        return self.entry_pos[entries][:, None, :].astype(np.int64) * BLOCK_SIZE + local[None]

    def extract_mesh(self, chunk: int = 128) -> Mesh:
        return extract_mesh(self, chunk=chunk)


def extract_mesh(vmap: VoxelBlockMap, chunk: int = 128) -> Mesh:
    """Marching cubes over resident, observed voxels.

    Cubes are emitted only when all eight corners belong to resident blocks
    and have non-zero weight. Vertices are in metres and faces wind so that
    normals point toward positive sdf.
    """
    from skimage.measure import marching_cubes

    entries = vmap.allocated_entries()
    if entries.size == 0:
        return Mesh()
    pos = vmap.entry_pos[entries].astype(np.int64)
    lo = pos.min(axis=0) * BLOCK_SIZE
    hi = (pos.max(axis=0) + 1) * BLOCK_SIZE
    all_v, all_f, nv = [], [], 0
    for x0 in range(lo[0], hi[0], chunk):
        for y0 in range(lo[1], hi[1], chunk):
            for z0 in range(lo[2], hi[2], chunk):
                c0 = np.array([x0, y0, z0])
                c1 = np.minimum(c0 + chunk + 1, hi)
                vol, ok = _dense_region(vmap, entries, pos, c0, c1)
                if vol is None:
                    continue
                cube_ok = ok[:-1, :-1, :-1].copy()
                for dx in (0, 1):
                    for dy in (0, 1):
                        for dz in (0, 1):
                            cube_ok &= ok[dx:dx + vol.shape[0] - 1, dy:dy + vol.shape[1] - 1, dz:dz + vol.shape[2] - 1]
                if not cube_ok.any():
                    continue
                vals = np.where(ok, vol, 1.0)
                if vals[ok].min() > 0 or vals[ok].max() < 0:
                    continue
                try:
                    v, f, _, _ = marching_cubes(vals, 0.0, allow_degenerate=False)
                except (ValueError, RuntimeError):
                    continue
                # skimage's mask is per sample, not per cube; keep triangles whose cube is fully observed
                f = f[_in_valid_cube(v, f, cube_ok)]
                if len(f) == 0:
                    continue
                all_v.append(v + c0)
                all_f.append(f + nv)
                nv += len(v)
    if not all_v:
        return Mesh()
    verts = np.concatenate(all_v)
    faces = np.concatenate(all_f)
    # weld vertices shared across chunk seams
    key = np.round(verts * 1e6).astype(np.int64)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    verts = verts[first]
    faces = inverse.reshape(-1)[faces]
    keep = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces = faces[keep]
    used, faces = np.unique(faces, return_inverse=True)
    return Mesh(verts[used] * vmap.voxel_size, faces.reshape(-1, 3))


def _in_valid_cube(v, f, cube_ok) -> np.ndarray:
    """Whether each triangle lies in a cube marked in ``cube_ok``.

    A triangle lying exactly on a face shared by two cubes is kept when
    either cube qualifies.
    """
    tri = v[f]
    lo = np.floor(tri.min(axis=1) + 1e-9).astype(np.int64)
    hi = np.ceil(tri.max(axis=1) - 1e-9).astype(np.int64) - 1
    shape = np.array(cube_ok.shape)
    keep = np.zeros(len(f), dtype=bool)
    for off in np.ndindex(2, 2, 2):
        o = np.where(np.array(off, dtype=bool), hi, lo)
        inside = np.all((o >= 0) & (o < shape), axis=1) & np.all(tri.min(axis=1) >= o - 1e-9, axis=1) \
            & np.all(tri.max(axis=1) <= o + 1 + 1e-9, axis=1)
        idx = np.flatnonzero(inside)
        keep[idx] |= cube_ok[o[idx, 0], o[idx, 1], o[idx, 2]]
    return keep


def _dense_region(vmap, entries, pos, c0, c1):
    """Dense sdf volume over voxel box ``[c0, c1)`` indexed ``[x, y, z]``."""
    shape = tuple(c1 - c0)
    bmin = np.floor_divide(c0, BLOCK_SIZE)
    bmax = np.floor_divide(c1 - 1, BLOCK_SIZE)
    sel = np.all((pos >= bmin) & (pos <= bmax), axis=1)
    if not sel.any():
        return None, None
    vol = np.ones(shape, dtype=np.float32)
    ok = np.zeros(shape, dtype=bool)
    for e, bp in zip(entries[sel], pos[sel]):
        ptr = vmap.entry_ptr[e]
        blk = stored_to_sdf(vmap.sdf[ptr]).reshape(8, 8, 8).transpose(2, 1, 0)
        wb = vmap.w_depth[ptr].reshape(8, 8, 8).transpose(2, 1, 0) > 0
        o = bp * BLOCK_SIZE - c0
        s0 = np.maximum(o, 0)
        s1 = np.minimum(o + BLOCK_SIZE, shape)
        if np.any(s1 <= s0):
            continue
        b0, b1 = s0 - o, s1 - o
        vol[s0[0]:s1[0], s0[1]:s1[1], s0[2]:s1[2]] = blk[b0[0]:b1[0], b0[1]:b1[1], b0[2]:b1[2]]
        ok[s0[0]:s1[0], s0[1]:s1[1], s0[2]:s1[2]] = wb[b0[0]:b1[0], b0[1]:b1[1], b0[2]:b1[2]]
    return vol, ok


def block_corners(vmap: VoxelBlockMap, entries) -> np.ndarray:
    """World-space corners (metres) of the given blocks, ``(E, 8, 3)``."""
    offs = np.array([[i, j, k] for k in (0, 1) for j in (0, 1) for i in (0, 1)], dtype=np.float64)
    pos = vmap.entry_pos[entries].astype(np.float64)
    return (pos[:, None, :] + offs[None]) * (BLOCK_SIZE * vmap.voxel_size)


def block_visibility(vmap: VoxelBlockMap, entries, pose, intrinsics, zmin: float, zmax: float,
                     margin: float = 0.0) -> np.ndarray:
    """Whether each block may be seen.

    The image-plane bounding box of the corners lying within ``[zmin, zmax]``
    must overlap the image enlarged by ``margin`` pixels on every side.
    """
    entries = np.asarray(entries, dtype=np.int64)
    if entries.size == 0:
        return np.zeros(0, dtype=bool)
    pts = pose.apply(block_corners(vmap, entries))
    u, v, z = intrinsics.project(pts)
    ok = (z >= zmin) & (z <= zmax)
    big = np.inf
    umin = np.where(ok, u, big).min(axis=1)
    umax = np.where(ok, u, -big).max(axis=1)
    vmin = np.where(ok, v, big).min(axis=1)
    vmax = np.where(ok, v, -big).max(axis=1)
    return ok.any(axis=1) & (umax >= -margin) & (umin < intrinsics.width + margin) \
        & (vmax >= -margin) & (vmin < intrinsics.height + margin)


def pack_block_keys(block_pos) -> np.ndarray:
    """Order-preserving int64 key per block position (coordinates within +-2**20)."""
    b = np.asarray(block_pos, dtype=np.int64).reshape(-1, 3) + (1 << 20)
    return (b[:, 0] << 42) | (b[:, 1] << 21) | b[:, 2]


def unpack_block_keys(keys) -> np.ndarray:
    k = np.asarray(keys, dtype=np.int64)
    m = (1 << 21) - 1
    return np.stack([(k >> 42) & m, (k >> 21) & m, k & m], axis=1) - (1 << 20)


class BlockIndex(_Sampler):
    """Read-only snapshot of the resident blocks, searched by sorted key.

    Much faster than walking hash chains for large vectorised reads. Valid
    until the map is next modified.
    """

    def __init__(self, vmap: VoxelBlockMap):
        e = vmap.allocated_entries()
        keys = pack_block_keys(vmap.entry_pos[e])
        order = np.argsort(keys)
        self.keys = keys[order]
        self.ptrs = vmap.entry_ptr[e][order].astype(np.int64)
        self.voxel_size = vmap.voxel_size
        self.sdf, self.w_depth, self.clr = vmap.sdf, vmap.w_depth, vmap.clr

    def block_ptrs(self, block_pos) -> np.ndarray:
        k = pack_block_keys(block_pos)
        if len(self.keys) == 0:
            return np.full(len(k), -1, dtype=np.int64)
        i = np.minimum(np.searchsorted(self.keys, k), len(self.keys) - 1)
        return np.where(self.keys[i] == k, self.ptrs[i], -1)
