//! Nearest-hit ray casting against triangle meshes.

use rayon::prelude::*;

use crate::camera::Camera;
use crate::geom::{Aabb, Vec3};
use crate::image::{DepthMap, ImagePlane};
use crate::mesh::{ray_triangle, TriangleMesh};

const LEAF_SIZE: usize = 4;
const T_MIN: f64 = 1e-9;

#[derive(Debug, Clone)]
struct BvhNode {
    bounds: Aabb,
    /// Leaf: `[start, start + count)` into `order`. Inner: children at
    /// `start` and `start + 1`... encoded via `count == 0`.
    start: u32,
    count: u32,
    left: u32,
    right: u32,
}

/// Bounding volume hierarchy over a mesh's triangles (median split on the
/// widest centroid axis).
#[derive(Debug, Clone)]
pub struct MeshBvh<'m> {
    mesh: &'m TriangleMesh,
    nodes: Vec<BvhNode>,
    order: Vec<u32>,
}

impl<'m> MeshBvh<'m> {
    pub fn new(mesh: &'m TriangleMesh) -> Self {
        let mut bvh = MeshBvh {
            mesh,
            nodes: Vec::new(),
            order: (0..mesh.triangles.len() as u32).collect(),
        };
        if !mesh.triangles.is_empty() {
            let centroids: Vec<Vec3> = (0..mesh.triangles.len())
                .map(|i| {
                    let [a, b, c] = mesh.triangle(i);
                    (a + b + c) / 3.0
                })
                .collect();
            let n = bvh.order.len();
            bvh.build(&centroids, 0, n);
        }
        bvh
    }

    fn tri_bounds(&self, i: u32) -> Aabb {
        let [a, b, c] = self.mesh.triangle(i as usize);
        Aabb::new(a.inf(&b).inf(&c), a.sup(&b).sup(&c))
    }

    fn build(&mut self, centroids: &[Vec3], start: usize, end: usize) -> u32 {
        let mut bounds = self.tri_bounds(self.order[start]);
        for &t in &self.order[start + 1..end] {
            bounds = bounds.union(&self.tri_bounds(t));
        }
        // pad so slab tests never reject a hit on the box boundary
        let pad = 1e-9 * (1.0 + bounds.extent().amax());
        bounds.min -= Vec3::repeat(pad);
        bounds.max += Vec3::repeat(pad);
        let id = self.nodes.len() as u32;
        self.nodes.push(BvhNode {
            bounds,
            start: start as u32,
            count: (end - start) as u32,
            left: 0,
            right: 0,
        });
        if end - start <= LEAF_SIZE {
            return id;
        }
        let mut cmin = centroids[self.order[start] as usize];
        let mut cmax = cmin;
        for &t in &self.order[start..end] {
            cmin = cmin.inf(&centroids[t as usize]);
            cmax = cmax.sup(&centroids[t as usize]);
        }
        let axis = (cmax - cmin).imax();
        let mid = (start + end) / 2;
        self.order[start..end].select_nth_unstable_by(mid - start, |a, b| {
            centroids[*a as usize][axis]
                .total_cmp(&centroids[*b as usize][axis])
                .then(a.cmp(b))
        });
        let left = self.build(centroids, start, mid);
        let right = self.build(centroids, mid, end);
        let node = &mut self.nodes[id as usize];
        node.count = 0;
        node.left = left;
        node.right = right;
        id
    }

    /// Distance to the nearest hit with `t > 1e-9`.
    pub fn nearest_hit(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = f64::INFINITY;
        let mut stack = vec![0u32];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id as usize];
            match node.bounds.ray_interval(origin, dir) {
                Some((t_in, _)) if t_in <= best => {}
                _ => continue,
            }
            if node.count > 0 {
                let range = node.start as usize..(node.start + node.count) as usize;
                for &t in &self.order[range] {
                    let tri = self.mesh.triangle(t as usize);
                    if let Some(hit) = ray_triangle(origin, dir, &tri, T_MIN) {
                        best = best.min(hit);
                    }
                }
            } else {
                stack.push(node.right);
                stack.push(node.left);
            }
        }
        best.is_finite().then_some(best)
    }
}

/// Range to the nearest mesh surface along every pixel ray; pixels whose
/// ray misses the mesh are invalid.
pub fn raycast_mesh_depth(mesh: &TriangleMesh, camera: &Camera) -> DepthMap {
    let bvh = MeshBvh::new(mesh);
    raycast_with_bvh(&bvh, camera)
}

pub fn raycast_with_bvh(bvh: &MeshBvh<'_>, camera: &Camera) -> DepthMap {
    let rows: Vec<Vec<Option<f64>>> = (0..camera.height)
        .into_par_iter()
        .map(|v| {
            (0..camera.width)
                .map(|u| {
                    let (o, d) = camera.pixel_ray(u, v);
                    bvh.nearest_hit(&o, &d)
                })
                .collect()
        })
        .collect();
    let mut out = ImagePlane::new(camera.width, camera.height, 1);
    for (v, row) in rows.into_iter().enumerate() {
        for (u, hit) in row.into_iter().enumerate() {
            if let Some(t) = hit {
                out.set(u, v, &[t as f32]);
            }
        }
    }
    out
}
