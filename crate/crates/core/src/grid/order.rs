//! View-dependent voxel ordering.

use std::cmp::Ordering;

use crate::camera::Camera;
use crate::grid::{SparseVoxelGrid, VoxelKey};

/// Ray-entry distance of a voxel as seen from `origin`: the slab entry
/// parameter of the ray from `origin` through the voxel center, clamped to
/// zero when the origin lies inside the voxel.
pub(crate) fn entry_distance(grid: &SparseVoxelGrid, key: &VoxelKey, origin: &crate::geom::Vec3) -> f64 {
    let center = grid.voxel_center(key);
    let to_center = center - origin;
    let dist = to_center.norm();
    if dist == 0.0 {
        return 0.0;
    }
    let dir = to_center / dist;
    match grid.node_aabb(key).line_interval(origin, &dir) {
        Some((t_in, _)) => t_in.max(0.0),
        None => dist,
    }
}

/// Active voxels sorted front to back for `camera`, ties broken by key.
pub fn front_to_back_order(grid: &SparseVoxelGrid, camera: &Camera) -> Vec<VoxelKey> {
    let origin = camera.center();
    let mut keyed: Vec<(f64, VoxelKey)> = grid.keys().map(|k| (entry_distance(grid, k, &origin), *k)).collect();
    keyed.sort_by(|a, b| match a.0.total_cmp(&b.0) {
        Ordering::Equal => a.1.cmp(&b.1),
        o => o,
    });
    keyed.into_iter().map(|(_, k)| k).collect()
}
