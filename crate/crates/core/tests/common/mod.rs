#![allow(dead_code)]

pub mod fusion_oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxfuse::camera::{Camera, Pose};
use voxfuse::geom::{Aabb, Vec3};
use voxfuse::grid::{morton_encode, SparseVoxelGrid};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_bounds() -> Aabb {
    Aabb::cube(Vec3::zeros(), 1.0)
}

/// Random antichain of voxels at levels `lo..=hi` with random corner
/// densities in `[0, max_density)` and random colours.
pub fn random_grid(rng: &mut ChaCha8Rng, count: usize, lo: u32, hi: u32, max_density: f32) -> SparseVoxelGrid {
    let mut g = SparseVoxelGrid::new(unit_bounds(), 0).unwrap();
    let mut attempts = 0;
    while g.len() < count && attempts < count * 50 {
        attempts += 1;
        let level = rng.random_range(lo..=hi);
        let n = 1u32 << level;
        let key = morton_encode(
            rng.random_range(0..n),
            rng.random_range(0..n),
            rng.random_range(0..n),
            level,
        )
        .unwrap();
        let dens: [f32; 8] = std::array::from_fn(|_| rng.random_range(0.0..max_density));
        let color: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let _ = g.insert(key, dens, color);
    }
    g
}

pub fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Camera at `eye` looking at the origin.
pub fn camera_at(eye: Vec3, w: usize, h: usize, fov: f64) -> Camera {
    let up = if eye.normalize().z.abs() > 0.99 {
        Vec3::y()
    } else {
        Vec3::z()
    };
    Camera::with_fov(w, h, fov, Pose::look_at(eye, Vec3::zeros(), up).unwrap()).unwrap()
}

/// Slab-method entry and exit of a line against a box; independent of
/// the crate's own intersection code.
pub fn slab(origin: &Vec3, dir: &Vec3, lo: &Vec3, hi: &Vec3) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        if dir[k] == 0.0 {
            if origin[k] < lo[k] || origin[k] > hi[k] {
                return None;
            }
            continue;
        }
        let a = (lo[k] - origin[k]) / dir[k];
        let b = (hi[k] - origin[k]) / dir[k];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t0 <= t1).then_some((t0, t1))
}

/// Textbook trilinear interpolation at local coordinates `u` in the unit cube.
pub fn trilinear(d: &[f32; 8], u: &Vec3) -> f64 {
    let mut s = 0.0;
    for (j, dj) in d.iter().enumerate() {
        let bx = if j & 1 == 1 { u.x } else { 1.0 - u.x };
        let by = if j & 2 == 2 { u.y } else { 1.0 - u.y };
        let bz = if j & 4 == 4 { u.z } else { 1.0 - u.z };
        s += *dj as f64 * bx * by * bz;
    }
    s
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}
