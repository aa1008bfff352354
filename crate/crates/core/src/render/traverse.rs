//! Sparse octree ray traversal.
//!
//! Every ancestor of an active voxel is recorded as an internal node. A ray
//! is walked from the bounds entry: at each probe point the octree is
//! descended from the root until an empty node (skipped whole) or an active
//! voxel (recorded with its exact slab interval) is reached.

use std::collections::HashMap;

use crate::geom::Vec3;
use crate::grid::{SparseVoxelGrid, Voxel, VoxelKey};

#[derive(Debug, Clone, Copy)]
enum Node {
    Leaf(u32),
    Internal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    /// Index into [`RenderIndex::voxels`] (grid iteration order).
    pub voxel: usize,
    pub t_in: f64,
    pub t_out: f64,
}

/// Read-only acceleration structure over a grid's active voxels.
pub struct RenderIndex<'g> {
    grid: &'g SparseVoxelGrid,
    voxels: Vec<Voxel>,
    colors: Vec<&'g [[f32; 3]]>,
    nodes: HashMap<VoxelKey, Node>,
    max_level: u32,
}

impl<'g> RenderIndex<'g> {
    pub fn new(grid: &'g SparseVoxelGrid) -> Self {
        let mut nodes = HashMap::with_capacity(grid.len() * 2);
        let mut voxels = Vec::with_capacity(grid.len());
        let mut colors = Vec::with_capacity(grid.len());
        for (i, (key, record)) in grid.iter().enumerate() {
            nodes.insert(*key, Node::Leaf(i as u32));
            let mut cur = key.parent();
            while let Some(k) = cur {
                if nodes.insert(k, Node::Internal).is_some() {
                    break;
                }
                cur = k.parent();
            }
            voxels.push(grid.voxel(key).expect("key from iteration"));
            colors.push(record.sh.as_slice());
        }
        let max_level = grid.levels().last().unwrap_or(0);
        RenderIndex {
            grid,
            voxels,
            colors,
            nodes,
            max_level,
        }
    }

    pub fn grid(&self) -> &SparseVoxelGrid {
        self.grid
    }

    pub fn voxels(&self) -> &[Voxel] {
        &self.voxels
    }

    pub fn sh(&self, i: usize) -> &[[f32; 3]] {
        self.colors[i]
    }

    /// Active voxels pierced by the ray, in increasing `t_in`.
    pub fn trace(&self, origin: &Vec3, dir: &Vec3, hits: &mut Vec<RayHit>) {
        hits.clear();
        if self.voxels.is_empty() {
            return;
        }
        let bounds = self.grid.bounds();
        let Some((t0, t1)) = bounds.ray_interval(origin, dir) else {
            return;
        };
        let nudge = 1e-9 * self.grid.extent();
        let mut t = t0.max(0.0);
        while t < t1 {
            let p = origin + dir * (t + nudge);
            let mut next = t + nudge;
            let mut level = 0;
            while level <= self.max_level {
                let Some(key) = self.grid.key_at(&p, level) else {
                    break;
                };
                match self.nodes.get(&key) {
                    None => {
                        if let Some((_, exit)) = self.grid.node_aabb(&key).line_interval(origin, dir) {
                            next = next.max(exit);
                        }
                        break;
                    }
                    Some(Node::Leaf(i)) => {
                        let i = *i as usize;
                        if let Some((t_in, t_out)) = ray_voxel_interval(origin, dir, &self.voxels[i]) {
                            if t_out > t_in {
                                hits.push(RayHit { voxel: i, t_in, t_out });
                            }
                            next = next.max(t_out);
                        }
                        break;
                    }
                    Some(Node::Internal) => level += 1,
                }
            }
            t = next;
        }
    }
}

/// Entry and exit parameters of a ray against a voxel cube.
///
/// `direction` must be unit length. The interval may begin behind the
/// origin when the origin lies inside the voxel; voxels entirely behind the
/// origin are a miss.
pub fn ray_voxel_interval(origin: &Vec3, direction: &Vec3, voxel: &Voxel) -> Option<(f64, f64)> {
    voxel.aabb().ray_interval(origin, direction)
}
