use rand::Rng;
use voxfuse::camera::Camera;
use voxfuse::fuse3d::{FusionConfig, ViewBundle};
use voxfuse::grid::{morton_encode, SparseVoxelGrid};
use voxfuse::image::ImagePlane;

use super::{camera_at, random_unit, rng, unit_bounds};

pub const DIM: usize = 5;

/// Random grid of level-4 voxels, random views with random features and
/// plausible depth maps (noisy ranges to the origin sphere of radius 0.6).
pub fn scene(seed: u64, voxels: usize, views: usize) -> (SparseVoxelGrid, Vec<ViewBundle>) {
    let mut r = rng(seed);
    let mut g = SparseVoxelGrid::new(unit_bounds(), 0).unwrap();
    while g.len() < voxels {
        let key = morton_encode(r.random_range(0..16), r.random_range(0..16), r.random_range(0..16), 4).unwrap();
        let _ = g.insert(key, [1.0; 8], [0.5; 3]);
    }
    let bundles = (0..views)
        .map(|_| {
            let cam = camera_at(random_unit(&mut r) * 2.8, 24, 20, 55.0);
            let depth = |r: &mut rand_chacha::ChaCha8Rng, noise: f64| {
                ImagePlane::from_fn(cam.width, cam.height, 1, |u, v| {
                    if r.random_bool(0.1) {
                        return None;
                    }
                    let (o, d) = cam.pixel_ray(u, v);
                    let b = o.dot(&d);
                    let disc = b * b - (o.norm_squared() - 0.36);
                    let t = if disc > 0.0 {
                        -b - disc.sqrt()
                    } else {
                        2.8 + r.random_range(0.0..1.0)
                    };
                    Some(vec![(t + r.random_range(-noise..noise)) as f32])
                })
            };
            let d_ren = depth(&mut r, 0.1);
            let d_mesh = depth(&mut r, 0.1);
            let feature = ImagePlane::from_fn(cam.width, cam.height, DIM, |_, _| {
                Some((0..DIM).map(|_| r.random_range(-1.0..1.0)).collect())
            });
            ViewBundle::new(cam, feature, d_ren, d_mesh).unwrap()
        })
        .collect();
    (g, bundles)
}

pub fn cfg(batch: usize) -> FusionConfig {
    FusionConfig {
        beta: 0.2,
        sigma_c: 0.1,
        eps: 1e-8,
        occlusion_margin: 0.25,
        batch_size: batch,
    }
}

/// Single pass over all voxels and views written straight from the
/// definitions: nearest-pixel depths, bilinear features.
pub fn monolithic(grid: &SparseVoxelGrid, views: &[ViewBundle], c: &FusionConfig) -> Vec<(Vec<f64>, f64)> {
    grid.keys()
        .map(|k| {
            let p = grid.voxel_center(k);
            let mut acc = [0.0; DIM];
            let mut wsum = 0.0;
            for v in views {
                let cam: &Camera = &v.camera;
                let q = cam.to_camera(&p);
                if q.z <= 0.0 {
                    continue;
                }
                let x = cam.fx * q.x / q.z + cam.cx;
                let y = cam.fy * q.y / q.z + cam.cy;
                if !(x >= 0.0 && y >= 0.0 && x < cam.width as f64 && y < cam.height as f64) {
                    continue;
                }
                let (u, w) = (x.floor() as usize, y.floor() as usize);
                let z = (p - cam.center()).norm();
                let dm = v.depth_mesh.scalar(u, w).map(f64::from);
                let dr = v.depth_ren.scalar(u, w).map(f64::from);
                let Some(surface) = dm.or(dr) else { continue };
                if z > surface + c.occlusion_margin {
                    continue;
                }
                let (Some(dm), Some(dr)) = (dm, dr) else { continue };
                let weight =
                    (-(z - dr).powi(2) / (2.0 * c.beta * c.beta)).exp() * (-(dm - dr).abs() / (2.0 * c.sigma_c)).exp();
                let Some(f) = v.feature.sample_bilinear(x, y) else {
                    continue;
                };
                for (a, fi) in acc.iter_mut().zip(&f) {
                    *a += weight * fi;
                }
                wsum += weight;
            }
            let feat = if wsum > 0.0 {
                acc.iter().map(|a| a / (wsum + c.eps)).collect()
            } else {
                vec![0.0; DIM]
            };
            (feat, wsum)
        })
        .collect()
}
