"""Two-tier block storage: a bounded resident map plus a host store.

Per frame, after allocation, visible or prefetched blocks that still hold
host data are copied back and merged into their freshly allocated resident
block, before integration touches it. After integration, resident blocks unseen for
``invisible_frames`` frames are copied out and their storage released.
Both directions move at most ``capacity`` blocks per frame.

File-backed host records are little-endian: a ``u32`` entry index followed
by 512 voxels of ``(sdf: i16, w_depth: u8, clr: 3 x u8, w_color: u8)`` in
in-block order ``x + 8 y + 64 z``.
"""
from __future__ import annotations

import os

import numpy as np

from .voxelmap import BLOCK_VOXELS, PTR_SWAPPED, VoxelBlockMap

VOXEL_DTYPE = np.dtype([("sdf", "<i2"), ("w_depth", "u1"), ("clr", "u1", (3,)), ("w_color", "u1")])
RECORD_DTYPE = np.dtype([("entry", "<u4"), ("voxels", VOXEL_DTYPE, (BLOCK_VOXELS,))])


def read_block(vmap: VoxelBlockMap, ptr: int) -> np.ndarray:
    rec = np.zeros(BLOCK_VOXELS, dtype=VOXEL_DTYPE)
    rec["sdf"] = vmap.sdf[ptr]
    rec["w_depth"] = vmap.w_depth[ptr]
    rec["clr"] = vmap.clr[ptr]
    rec["w_color"] = vmap.w_color[ptr]
    return rec


def write_block(vmap: VoxelBlockMap, ptr: int, voxels: np.ndarray):
    vmap.sdf[ptr] = voxels["sdf"]
    vmap.w_depth[ptr] = voxels["w_depth"]
    vmap.clr[ptr] = voxels["clr"]
    vmap.w_color[ptr] = voxels["w_color"]


def merge_voxels(device: np.ndarray, host: np.ndarray, max_w: int) -> np.ndarray:
    """Weighted average of two voxel blocks, as in integration; weights clamp at ``max_w``."""
    out = np.zeros_like(device)
    for f, w in (("sdf", "w_depth"), ("clr", "w_color")):
        wd = device[w].astype(np.int64)
        wh = host[w].astype(np.int64)
        tot = wd + wh
        if f == "clr":
            wd, wh, tt = wd[:, None], wh[:, None], tot[:, None]
        else:
            tt = tot
        num = wd * device[f].astype(np.float64) + wh * host[f].astype(np.float64)
        val = np.where(tt > 0, num / np.maximum(tt, 1), device[f])
        out[f] = np.rint(val).astype(out[f].dtype)
        out[w] = np.minimum(tot, max_w)
    return out


class HostStore:
    """Host tier keyed by hash entry index."""

    def put(self, entry: int, voxels: np.ndarray):  # pragma: no cover - interface
        raise NotImplementedError

    def get(self, entry: int) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError

    def discard(self, entry: int):  # pragma: no cover - interface
        raise NotImplementedError

    def __contains__(self, entry: int) -> bool:  # pragma: no cover - interface
        raise NotImplementedError


class MemoryHostStore(HostStore):
    def __init__(self):
        self._blocks: dict[int, np.ndarray] = {}

    def put(self, entry, voxels):
        self._blocks[int(entry)] = voxels.copy()

    def get(self, entry):
        return self._blocks[int(entry)].copy()

    def discard(self, entry):
        self._blocks.pop(int(entry), None)

    def __contains__(self, entry):
        return int(entry) in self._blocks

    def __len__(self):
        return len(self._blocks)


class FileHostStore(HostStore):
    """Fixed-size records in a single file; freed slots are reused."""

    def __init__(self, path):
        self.path = os.fspath(path)
        self._slots: dict[int, int] = {}
        self._free: list[int] = []
        self._n_slots = 0
        open(self.path, "wb").close()

    def put(self, entry, voxels):
        entry = int(entry)
        slot = self._slots.get(entry)
        if slot is None:
            slot = self._free.pop() if self._free else self._n_slots
            if slot == self._n_slots:
                self._n_slots += 1
            self._slots[entry] = slot
        rec = np.zeros(1, dtype=RECORD_DTYPE)
        rec["entry"] = entry
        rec["voxels"] = voxels
        with open(self.path, "r+b") as fh:
            fh.seek(slot * RECORD_DTYPE.itemsize)
            fh.write(rec.tobytes())

    def get(self, entry):
        slot = self._slots[int(entry)]
        with open(self.path, "rb") as fh:
            fh.seek(slot * RECORD_DTYPE.itemsize)
            rec = np.frombuffer(fh.read(RECORD_DTYPE.itemsize), dtype=RECORD_DTYPE)[0]
        if int(rec["entry"]) != int(entry):
            raise RuntimeError(f"host record for entry {entry} is corrupt")
        return rec["voxels"].copy()

    def discard(self, entry):
        slot = self._slots.pop(int(entry), None)
        if slot is not None:
            self._free.append(slot)

    def __contains__(self, entry):
        return int(entry) in self._slots

    def __len__(self):
        return len(self._slots)


class GlobalCache:
    """Swapping state for one map.

    Parameters
    ----------
    capacity : int
        Blocks moved per frame in each direction.
    invisible_frames : int
        Consecutive frames a resident block must be out of view before eviction.
    mode : {"enabled", "delete"}
        ``"delete"`` discards evicted blocks instead of storing them.
    """

    def __init__(self, n_entries: int, capacity: int = 512, store: HostStore | None = None,
                 invisible_frames: int = 2, mode: str = "enabled", max_w: int = 100):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        if mode not in ("enabled", "delete"):
            raise ValueError(f"unknown swapping mode {mode!r}")
        self.capacity = capacity
        self.store = store if store is not None else MemoryHostStore()
        self.invisible_frames = invisible_frames
        self.mode = mode
        self.max_w = max_w
        self.has_stored_data = np.zeros(n_entries, dtype=bool)
        self.frames_invisible = np.zeros(n_entries, dtype=np.int32)
        self.transfer_in = np.zeros(capacity, dtype=RECORD_DTYPE)
        self.transfer_out = np.zeros(capacity, dtype=RECORD_DTYPE)
        self.n_staged = 0
        self.needed_entries = np.zeros(0, dtype=np.int64)
        self.swap_out_entries = np.zeros(0, dtype=np.int64)
        self.last_in = 0
        self.last_out = 0

    @classmethod
    def for_map(cls, vmap: VoxelBlockMap, **kwargs) -> GlobalCache:
        return cls(vmap.n_entries, **kwargs)

    @property
    def n_pending(self) -> int:
        return int(self.has_stored_data.sum())


def request_swap_in(vmap: VoxelBlockMap, cache: GlobalCache) -> int:
    """Stage host data for visible resident entries that still have some; returns the count."""
    # blocks about to be integrated go first, prefetched ones fill the remaining slots
    needed = []
    for group in (vmap.visible_entries, vmap.prefetch_entries):
        g = np.asarray(group, dtype=np.int64)
        needed.append(np.sort(g[cache.has_stored_data[g] & (vmap.entry_ptr[g] >= 0)]))
    needed = np.concatenate(needed)
    cache.needed_entries = needed
    take = needed[:cache.capacity]
    for i, e in enumerate(take):
        cache.transfer_in[i]["entry"] = e
        cache.transfer_in[i]["voxels"] = cache.store.get(e)
    cache.n_staged = len(take)
    return cache.n_staged


def apply_swapped_in(vmap: VoxelBlockMap, cache: GlobalCache) -> int:
    """Merge staged host blocks into their resident blocks; returns the count merged."""
    n = 0
    for rec in cache.transfer_in[:cache.n_staged]:
        e = int(rec["entry"])
        ptr = int(vmap.entry_ptr[e])
        if ptr < 0:
            continue
        merged = merge_voxels(read_block(vmap, ptr), rec["voxels"], cache.max_w)
        write_block(vmap, ptr, merged)
        cache.has_stored_data[e] = False
        cache.store.discard(e)
        n += 1
    cache.n_staged = 0
    cache.last_in = n
    return n


def swap_in(vmap: VoxelBlockMap, cache: GlobalCache) -> int:
    request_swap_in(vmap, cache)
    return apply_swapped_in(vmap, cache)


def update_visibility_age(vmap: VoxelBlockMap, cache: GlobalCache):
    """Count consecutive frames each resident entry has been out of the visible list."""
    visible = np.zeros(vmap.n_entries, dtype=bool)
    visible[np.asarray(vmap.visible_entries, dtype=np.int64)] = True
    visible[np.asarray(vmap.prefetch_entries, dtype=np.int64)] = True
    resident = vmap.entry_ptr >= 0
    cache.frames_invisible[visible] = 0
    cache.frames_invisible[resident & ~visible] += 1
    cache.frames_invisible[~resident] = 0


def swap_out(vmap: VoxelBlockMap, cache: GlobalCache) -> int:
    """Evict up to ``capacity`` long-unseen blocks, lowest entry first; returns the count."""
    eligible = np.flatnonzero((vmap.entry_ptr >= 0) & (cache.frames_invisible >= cache.invisible_frames)
                              & ~cache.has_stored_data)
    take = eligible[:cache.capacity]
    cache.swap_out_entries = take
    for i, e in enumerate(take):
        ptr = int(vmap.entry_ptr[e])
        cache.transfer_out[i]["entry"] = e
        cache.transfer_out[i]["voxels"] = read_block(vmap, ptr)
    for rec in cache.transfer_out[:len(take)]:
        e = int(rec["entry"])
        if cache.mode == "enabled":
            cache.store.put(e, rec["voxels"])
            cache.has_stored_data[e] = True
        vmap.push_block(int(vmap.entry_ptr[e]))
        vmap.entry_ptr[e] = PTR_SWAPPED
        cache.frames_invisible[e] = 0
    cache.last_out = len(take)
    return len(take)


def logical_contents(vmap: VoxelBlockMap, cache: GlobalCache | None = None) -> dict:
    """Block position -> voxel records as if nothing had been swapped out.

    Resident blocks with host data still pending are merged with it the way
    a swap-in would.
    """
    out = {}
    for e in np.flatnonzero(vmap.entry_ptr >= PTR_SWAPPED):
        e = int(e)
        ptr = int(vmap.entry_ptr[e])
        host = cache.store.get(e) if cache is not None and cache.has_stored_data[e] else None
        if ptr >= 0:
            vox = read_block(vmap, ptr)
            if host is not None:
                vox = merge_voxels(vox, host, cache.max_w)
        elif host is not None:
            vox = host
        else:
            continue
        out[tuple(int(c) for c in vmap.entry_pos[e])] = vox
    return out


def materialise(vmap: VoxelBlockMap, cache: GlobalCache | None = None) -> VoxelBlockMap:
    """A fresh map holding every block, resident or on the host, with pending data merged."""
    contents = logical_contents(vmap, cache)
    out = VoxelBlockMap(vmap.voxel_size, vmap.bucket_count, vmap.excess_count,
                        max(len(contents), 1))
    for pos, vox in contents.items():
        write_block(out, int(out.entry_ptr[out.allocate_block(pos)]), vox)
    return out

