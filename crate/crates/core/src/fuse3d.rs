//! Confidence-weighted multi-view fusion of 2D feature maps into voxels.
//!
//! Depth maps hold the range along each pixel ray, so the voxel "depth"
//! compared against them is the distance from the camera center to the
//! voxel center.

use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::grid::{SparseVoxelGrid, Voxel, VoxelKey};
use crate::image::{ConfidenceMap, DepthMap, FeatureMap, ImagePlane};

#[derive(Debug, Clone)]
pub struct ViewBundle {
    pub camera: Camera,
    pub feature: FeatureMap,
    pub depth_ren: DepthMap,
    pub depth_mesh: DepthMap,
}

impl ViewBundle {
    pub fn new(camera: Camera, feature: FeatureMap, depth_ren: DepthMap, depth_mesh: DepthMap) -> Result<Self> {
        for (map, what) in [
            (&feature, "feature map"),
            (&depth_ren, "rendered depth"),
            (&depth_mesh, "mesh depth"),
        ] {
            if map.width != camera.width || map.height != camera.height {
                return Err(Error::DimensionMismatch(format!(
                    "{what} is {}x{}, camera is {}x{}",
                    map.width, map.height, camera.width, camera.height
                )));
            }
        }
        if depth_ren.channels != 1 || depth_mesh.channels != 1 {
            return Err(Error::DimensionMismatch("depth maps must have one channel".into()));
        }
        Ok(ViewBundle {
            camera,
            feature,
            depth_ren,
            depth_mesh,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    /// Spatial bandwidth around the rendered surface (meters).
    pub beta: f64,
    /// Confidence decay (meters).
    pub sigma_c: f64,
    pub eps: f64,
    pub occlusion_margin: f64,
    pub batch_size: usize,
}

impl FusionConfig {
    /// Defaults scaled to a voxel edge length.
    pub fn for_voxel_edge(edge: f64) -> Self {
        FusionConfig {
            beta: 2.0 * edge,
            sigma_c: edge,
            eps: 1e-8,
            occlusion_margin: 2.0 * edge,
            batch_size: 4096,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.sigma_c > 0.0 && self.eps > 0.0) {
            return Err(Error::domain("beta, sigma_c and eps must be positive"));
        }
        if !(self.occlusion_margin >= 0.0) {
            return Err(Error::domain("occlusion_margin must be non-negative"));
        }
        if self.batch_size < 1 {
            return Err(Error::domain("batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// Gaussian falloff of a sample's distance to the rendered surface; zero
/// when the rendered depth is missing.
pub fn spatial_weight(z: f64, d_ren: Option<f64>, beta: f64) -> f64 {
    match d_ren {
        Some(d) if d.is_finite() => (-(z - d) * (z - d) / (2.0 * beta * beta)).exp(),
        _ => 0.0,
    }
}

fn confidence(d_mesh: Option<f32>, d_ren: Option<f32>, sigma_c: f64) -> f64 {
    match (d_mesh, d_ren) {
        (Some(m), Some(r)) => (-((m as f64 - r as f64).abs()) / (2.0 * sigma_c)).exp(),
        _ => 0.0,
    }
}

/// Per-pixel trust from the mesh/render depth discrepancy. Every pixel is
/// valid; pixels missing either depth get zero.
pub fn confidence_map(d_mesh: &DepthMap, d_ren: &DepthMap, sigma_c: f64) -> Result<ConfidenceMap> {
    d_mesh.check_same_size(d_ren, "confidence inputs")?;
    Ok(ImagePlane::from_fn(d_mesh.width, d_mesh.height, 1, |u, v| {
        Some(vec![confidence(d_mesh.scalar(u, v), d_ren.scalar(u, v), sigma_c) as f32])
    }))
}

/// In-frustum and not occluded by the mesh surface (or, where the mesh
/// missed, by the rendered surface) by more than `margin`.
pub fn visible(voxel: &Voxel, view: &ViewBundle, margin: f64) -> bool {
    visible_point(&voxel.center, view, margin).is_some()
}

/// Projection data of a visible point: continuous image coordinates,
/// pixel, and range from the camera center.
fn visible_point(p: &Vec3, view: &ViewBundle, margin: f64) -> Option<(f64, f64, usize, usize, f64)> {
    let cam = &view.camera;
    let (x, y, _) = cam.project(p)?;
    let (u, v) = cam.pixel_of(x, y)?;
    let range = (p - cam.center()).norm();
    let surface = view.depth_mesh.scalar(u, v).or_else(|| view.depth_ren.scalar(u, v))?;
    (range <= surface as f64 + margin).then_some((x, y, u, v, range))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionStats {
    pub mean_confidence: Vec<f64>,
    pub fused: usize,
    pub unfused: usize,
    pub batches: usize,
    /// Largest accumulator allocation held by any batch.
    pub peak_accumulator_bytes: usize,
}

impl FusionStats {
    pub fn unfused_fraction(&self) -> f64 {
        let n = self.fused + self.unfused;
        if n == 0 {
            0.0
        } else {
            self.unfused as f64 / n as f64
        }
    }
}

/// Accumulates one view into a voxel's running sums.
fn accumulate(p: &Vec3, view: &ViewBundle, cfg: &FusionConfig, acc: &mut [f64], wsum: &mut f64) {
    let Some((x, y, u, v, range)) = visible_point(p, view, cfg.occlusion_margin) else {
        return;
    };
    let d_ren = view.depth_ren.scalar(u, v);
    let w = spatial_weight(range, d_ren.map(f64::from), cfg.beta)
        * confidence(view.depth_mesh.scalar(u, v), d_ren, cfg.sigma_c);
    if w <= 0.0 {
        return;
    }
    let Some(f) = view.feature.sample_bilinear(x, y) else {
        return;
    };
    *wsum += w;
    for (a, s) in acc.iter_mut().zip(&f) {
        *a += w * s;
    }
}

/// Fuses view features into every active voxel.
///
/// Voxels are processed in key order in disjoint batches of
/// `cfg.batch_size`; within a batch views are streamed in order, so each
/// voxel's sums are accumulated in the same order whatever the batching.
pub fn fuse(grid: &mut SparseVoxelGrid, views: &[ViewBundle], cfg: &FusionConfig) -> Result<FusionStats> {
    cfg.validate()?;
    let Some(first) = views.first() else {
        return Err(Error::domain("fusion needs at least one view"));
    };
    if grid.is_empty() {
        return Err(Error::EmptyDomain("grid has no active voxels".into()));
    }
    let dim = first.feature.channels;
    for (k, view) in views.iter().enumerate() {
        if view.feature.channels != dim {
            return Err(Error::DimensionMismatch(format!(
                "view {k} has {} feature channels, view 0 has {dim}",
                view.feature.channels
            )));
        }
    }
    let mean_confidence = views
        .par_iter()
        .map(|view| {
            let cm = confidence_map(&view.depth_mesh, &view.depth_ren, cfg.sigma_c)?;
            let valid = cm.valid_count();
            let sum: f64 = cm
                .values
                .iter()
                .zip(&cm.valid)
                .filter(|(_, v)| **v)
                .map(|(c, _)| *c as f64)
                .sum();
            Ok(if valid == 0 { 0.0 } else { sum / valid as f64 })
        })
        .collect::<Result<Vec<f64>>>()?;

    grid.reset_features(dim);
    let keys: Vec<VoxelKey> = grid.keys().copied().collect();
    let mut stats = FusionStats {
        mean_confidence,
        fused: 0,
        unfused: 0,
        batches: 0,
        peak_accumulator_bytes: 0,
    };
    for batch in keys.chunks(cfg.batch_size) {
        let centers: Vec<Vec3> = batch.iter().map(|k| grid.voxel_center(k)).collect();
        let mut acc = vec![0.0f64; batch.len() * dim];
        let mut wsum = vec![0.0f64; batch.len()];
        stats.peak_accumulator_bytes = stats
            .peak_accumulator_bytes
            .max((acc.len() + wsum.len()) * std::mem::size_of::<f64>());
        for view in views {
            acc.par_chunks_mut(dim.max(1))
                .zip(wsum.par_iter_mut())
                .zip(centers.par_iter())
                .for_each(|((a, w), p)| accumulate(p, view, cfg, a, w));
        }
        for (i, key) in batch.iter().enumerate() {
            let record = grid.record_mut(key).expect("key from grid");
            let w = wsum[i];
            if w > 0.0 {
                let denom = w + cfg.eps;
                for (f, a) in record.feature.iter_mut().zip(&acc[i * dim..(i + 1) * dim]) {
                    *f = (a / denom) as f32;
                }
                record.weight_sum = w as f32;
                stats.fused += 1;
            } else {
                stats.unfused += 1;
            }
        }
        stats.batches += 1;
    }
    Ok(stats)
}
