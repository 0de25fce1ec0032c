import numpy as np
import pytest

from hashfusion.swapping import (RECORD_DTYPE, VOXEL_DTYPE, FileHostStore, GlobalCache, MemoryHostStore,
                                 apply_swapped_in, logical_contents, merge_voxels, read_block, request_swap_in,
                                 swap_in, swap_out, update_visibility_age)
from hashfusion.voxelmap import PTR_SWAPPED, VoxelBlockMap, sdf_to_stored, stored_to_sdf

from helpers import fill_block


def voxels(sdf, w):
    v = np.zeros(512, dtype=VOXEL_DTYPE)
    v["sdf"] = sdf_to_stored(sdf)
    v["w_depth"] = w
    return v


def random_map(n, seed=0, **kw):
    args = dict(bucket_count=2 ** 12, excess_count=2 ** 10, block_capacity=1024)
    args.update(kw)
    vm = VoxelBlockMap(0.01, **args)
    r = np.random.default_rng(seed)
    entries = [fill_block(vm, (i, i % 7, -i), lambda c: r.uniform(-1, 1, len(c))) for i in range(n)]
    for e in entries:
        ptr = vm.entry_ptr[e]
        vm.w_depth[ptr] = r.integers(1, 50, 512)
        vm.clr[ptr] = r.integers(0, 256, (512, 3))
        vm.w_color[ptr] = r.integers(1, 50, 512)
    return vm, np.sort(np.array(entries, dtype=np.int64))


def evict_all(vm, cache):
    vm.visible_entries = np.zeros(0, dtype=np.int64)
    for _ in range(cache.invisible_frames):
        update_visibility_age(vm, cache)
    return swap_out(vm, cache)


def bring_back(vm, entries):
    for e in entries:
        vm.entry_ptr[e] = vm.pop_block()
    vm.visible_entries = np.asarray(entries, dtype=np.int64)


def test_merge_into_fresh_block():
    out = merge_voxels(voxels(1.0, 0), voxels(0.2, 10), 100)
    assert np.all(out["sdf"] == sdf_to_stored(0.2)) and np.all(out["w_depth"] == 10)


def test_merge_equal_weights_averages():
    out = merge_voxels(voxels(0.0, 5), voxels(1.0, 5), 100)
    assert stored_to_sdf(out["sdf"][0]) == pytest.approx(0.5, abs=1 / 32767)
    assert np.all(out["w_depth"] == 10)


def test_merge_two_fresh_blocks_stays_fresh():
    out = merge_voxels(voxels(1.0, 0), voxels(1.0, 0), 100)
    assert np.all(out["w_depth"] == 0) and np.all(out["sdf"] == sdf_to_stored(1.0))


def test_merge_clamps_weight():
    assert np.all(merge_voxels(voxels(0.1, 80), voxels(0.1, 80), 100)["w_depth"] == 100)


def test_swap_in_capacity_clamp():
    vm, entries = random_map(300, block_capacity=1024)
    cache = GlobalCache.for_map(vm, capacity=256)
    assert evict_all(vm, cache) == 256
    assert evict_all(vm, cache) == 44
    bring_back(vm, entries)
    assert request_swap_in(vm, cache) == 256
    assert apply_swapped_in(vm, cache) == 256
    assert request_swap_in(vm, cache) == 44
    assert apply_swapped_in(vm, cache) == 44
    assert cache.n_pending == 0


def test_nothing_marked_queues_nothing():
    vm, entries = random_map(5)
    cache = GlobalCache.for_map(vm)
    vm.visible_entries = entries
    assert request_swap_in(vm, cache) == 0


def test_staged_block_is_host_copy():
    vm, entries = random_map(3)
    cache = GlobalCache.for_map(vm)
    evict_all(vm, cache)
    host = cache.store.get(entries[1])
    bring_back(vm, entries[1:2])
    assert request_swap_in(vm, cache) == 1
    assert cache.transfer_in[0].tobytes() == np.array((entries[1], host), dtype=RECORD_DTYPE).tobytes()


@pytest.mark.parametrize("store", ["memory", "file"])
def test_evict_and_return_is_lossless(store, tmp_path):
    vm, entries = random_map(20)
    before = {e: read_block(vm, vm.entry_ptr[e]).tobytes() for e in entries}
    host = MemoryHostStore() if store == "memory" else FileHostStore(tmp_path / "host.bin")
    cache = GlobalCache.for_map(vm, store=host)
    assert evict_all(vm, cache) == 20
    assert np.all(vm.entry_ptr[entries] == PTR_SWAPPED)
    assert vm.n_allocated_blocks == 0
    bring_back(vm, entries)
    assert swap_in(vm, cache) == 20
    for e in entries:
        assert read_block(vm, vm.entry_ptr[e]).tobytes() == before[e]
    assert len(host) == 0


def test_nothing_eligible_evicts_nothing():
    vm, entries = random_map(4)
    cache = GlobalCache.for_map(vm)
    vm.visible_entries = entries
    update_visibility_age(vm, cache)
    assert swap_out(vm, cache) == 0


def test_eviction_order_is_lowest_entry_first():
    vm, entries = random_map(5)
    cache = GlobalCache.for_map(vm, capacity=2)
    assert evict_all(vm, cache) == 2
    assert cache.swap_out_entries.tolist() == entries[:2].tolist()


def test_one_unseen_frame_is_not_enough():
    vm, _ = random_map(4)
    cache = GlobalCache.for_map(vm, invisible_frames=2)
    vm.visible_entries = np.zeros(0, dtype=np.int64)
    update_visibility_age(vm, cache)
    assert swap_out(vm, cache) == 0
    update_visibility_age(vm, cache)
    assert swap_out(vm, cache) == 4


def test_block_conservation():
    vm, entries = random_map(30)
    cache = GlobalCache.for_map(vm, capacity=7)
    while evict_all(vm, cache):
        assert vm.n_allocated_blocks + vm.n_free_blocks == vm.block_capacity
    bring_back(vm, entries[:10])
    swap_in(vm, cache)
    assert vm.n_allocated_blocks + vm.n_free_blocks == vm.block_capacity
    assert vm.n_allocated_blocks == 10


def test_logical_contents_survive_eviction():
    vm, entries = random_map(12)
    before = logical_contents(vm)
    cache = GlobalCache.for_map(vm, capacity=5)
    evict_all(vm, cache)
    after = logical_contents(vm, cache)
    assert before.keys() == after.keys()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_delete_mode_discards():
    vm, entries = random_map(3)
    cache = GlobalCache.for_map(vm, mode="delete")
    assert evict_all(vm, cache) == 3
    assert cache.n_pending == 0 and len(cache.store) == 0
    assert logical_contents(vm, cache) == {}


def test_file_store_record_layout(tmp_path):
    store = FileHostStore(tmp_path / "host.bin")
    block = voxels(0.25, 3)
    block["clr"] = (1, 2, 3)
    store.put(7, block)
    store.put(9, voxels(-0.5, 1))
    raw = (tmp_path / "host.bin").read_bytes()
    assert len(raw) == 2 * RECORD_DTYPE.itemsize == 2 * (4 + 512 * 7)
    assert raw[:4] == (7).to_bytes(4, "little")
    assert int.from_bytes(raw[4:6], "little", signed=True) == sdf_to_stored(0.25)
    assert raw[6:11] == bytes([3, 1, 2, 3, 0])
    # a freed slot is reused
    store.discard(7)
    store.put(11, block)
    assert (tmp_path / "host.bin").stat().st_size == len(raw)
    assert np.array_equal(store.get(11), block)


def test_cache_validation():
    with pytest.raises(ValueError):
        GlobalCache(10, capacity=0)
    with pytest.raises(ValueError):
        GlobalCache(10, mode="sometimes")
