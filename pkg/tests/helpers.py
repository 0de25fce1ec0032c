import numpy as np

from hashfusion.voxelmap import VoxelBlockMap, sdf_to_stored


def fill_block(vm, pos, fn):
    """Write ``fn(global voxel coords)`` into every voxel of block ``pos`` with weight 1."""
    e = vm.allocate_block(pos)
    ptr = vm.entry_ptr[e]
    coords = vm.block_voxel_coords([e])[0]
    vm.sdf[ptr] = sdf_to_stored(fn(coords.astype(float)))
    vm.w_depth[ptr] = 1
    return e


def plane_slab_map(z_plane=1.0, voxel=0.01, mu=0.04, half_width=4, z_blocks=(1, 2)):
    """Blocks around the plane ``z = z_plane`` holding its exact truncated distance."""
    vm = VoxelBlockMap(voxel, bucket_count=2 ** 12, excess_count=2 ** 10, block_capacity=4096)
    bz0 = int(np.floor((z_plane - mu) / (8 * voxel))) - z_blocks[0] + 1
    bz1 = int(np.floor((z_plane + mu) / (8 * voxel))) + z_blocks[1] - 1
    for bx in range(-half_width, half_width):
        for by in range(-half_width, half_width):
            for bz in range(bz0, bz1 + 1):
                fill_block(vm, (bx, by, bz), lambda c: np.clip((z_plane - c[:, 2] * voxel) / mu, -1, 1))
    return vm
