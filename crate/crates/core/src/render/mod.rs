//! Alpha-composited rendering of the sparse grid and ray casting of meshes.
//!
//! Each pixel ray visits the active voxels it pierces in front-to-back
//! order. Voxel `j` contributes with weight `T_j * alpha_j`, where
//! `alpha_j = 1 - exp(-sigma_j * delta_j)`, `sigma_j` is the mean trilinear
//! density over `samples_per_interval` evenly spaced points of the
//! intersection interval and `T_j` is the product of `1 - alpha` over the
//! voxels in front.

mod raycast;
mod traverse;

use rayon::prelude::*;

pub use raycast::{raycast_mesh_depth, raycast_with_bvh, MeshBvh};
pub use traverse::{ray_voxel_interval, RayHit, RenderIndex};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::grid::{self, SparseVoxelGrid, Voxel};
use crate::image::{AlphaMap, ColorMap, DepthMap, ImagePlane, NormalMap};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    /// Trilinear samples averaged over each ray-voxel interval.
    pub samples_per_interval: usize,
    /// Pixels with accumulated alpha below this are invalid in depth and
    /// normal maps.
    pub alpha_valid_min: f64,
    /// Compositing stops once transmittance falls below this.
    pub min_transmittance: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            samples_per_interval: 1,
            alpha_valid_min: 0.5,
            min_transmittance: 1e-4,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_interval == 0 {
            return Err(Error::domain("samples_per_interval must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha_valid_min) {
            return Err(Error::domain("alpha_valid_min must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.min_transmittance) {
            return Err(Error::domain("min_transmittance must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: ColorMap,
    pub depth: DepthMap,
    pub alpha: AlphaMap,
    pub normal: NormalMap,
}

/// One composited contribution along a ray.
#[derive(Debug, Clone, Copy)]
pub struct Contribution {
    pub voxel: usize,
    /// `T_j * alpha_j`.
    pub weight: f64,
    pub alpha: f64,
    pub transmittance: f64,
    /// Ray parameter at the interval midpoint.
    pub t_mid: f64,
}

fn density_at(voxel: &Voxel, p: &Vec3) -> f64 {
    let u = ((p - voxel.min_corner()) / voxel.size).map(|c| c.clamp(0.0, 1.0));
    grid::trilinear(&voxel.densities, &u)
}

/// Front-to-back compositing of the voxels pierced by one ray. Calls
/// `visit` once per contributing voxel and returns the accumulated alpha.
pub fn composite_ray<F>(
    index: &RenderIndex<'_>,
    origin: &Vec3,
    dir: &Vec3,
    cfg: &RenderConfig,
    hits: &mut Vec<RayHit>,
    mut visit: F,
) -> f64
where
    F: FnMut(&Contribution),
{
    index.trace(origin, dir, hits);
    let n = cfg.samples_per_interval.max(1);
    let mut transmittance = 1.0;
    let mut acc = 0.0;
    for hit in hits.iter() {
        let voxel = &index.voxels()[hit.voxel];
        let t_a = hit.t_in.max(0.0);
        let delta = hit.t_out - t_a;
        if delta <= 0.0 {
            continue;
        }
        let mean_sigma = (0..n)
            .map(|s| {
                let t = t_a + (s as f64 + 0.5) / n as f64 * delta;
                density_at(voxel, &(origin + dir * t))
            })
            .sum::<f64>()
            / n as f64;
        let alpha = 1.0 - (-mean_sigma * delta).exp();
        if alpha <= 0.0 {
            continue;
        }
        let weight = transmittance * alpha;
        visit(&Contribution {
            voxel: hit.voxel,
            weight,
            alpha,
            transmittance,
            t_mid: t_a + 0.5 * delta,
        });
        acc += weight;
        transmittance *= 1.0 - alpha;
        if transmittance < cfg.min_transmittance || transmittance == 0.0 {
            break;
        }
    }
    acc
}

/// Outward surface normal of a voxel's density field at `p`: the
/// normalised negative density gradient, or zero where the field is flat.
fn voxel_normal(voxel: &Voxel, p: &Vec3) -> Vec3 {
    let u = ((p - voxel.min_corner()) / voxel.size).map(|c| c.clamp(0.0, 1.0));
    let g = -grid::trilinear_gradient(&voxel.densities, &u);
    g.try_normalize(1e-12).unwrap_or_else(Vec3::zeros)
}

struct PixelSample {
    color: [f32; 3],
    alpha: f32,
    depth: Option<f32>,
    normal: Option<[f32; 3]>,
}

/// Renders colour, depth (range along the ray), alpha and world-space
/// normal maps of `grid` as seen by `camera`.
///
/// Colour is the plain alpha-weighted sum over a black background. Depth
/// is the alpha-normalised sum of voxel-center distances, and the normal
/// is the alpha-weighted sum of per-voxel normals, renormalised.
pub fn render(grid: &SparseVoxelGrid, camera: &Camera, cfg: &RenderConfig) -> Result<RenderOutput> {
    cfg.validate()?;
    let index = RenderIndex::new(grid);
    Ok(render_with_index(&index, camera, cfg))
}

pub fn render_with_index(index: &RenderIndex<'_>, camera: &Camera, cfg: &RenderConfig) -> RenderOutput {
    let (w, h) = (camera.width, camera.height);
    let origin = camera.center();
    let rows: Vec<Vec<PixelSample>> = (0..h)
        .into_par_iter()
        .map(|v| {
            let mut hits = Vec::new();
            (0..w)
                .map(|u| {
                    let (_, dir) = camera.pixel_ray(u, v);
                    let mut color = [0.0f64; 3];
                    let mut depth = 0.0;
                    let mut normal = Vec3::zeros();
                    let alpha = composite_ray(index, &origin, &dir, cfg, &mut hits, |c| {
                        let voxel = &index.voxels()[c.voxel];
                        let rgb = grid::sh::eval(index.sh(c.voxel), &dir);
                        for k in 0..3 {
                            color[k] += c.weight * rgb[k];
                        }
                        depth += c.weight * (voxel.center - origin).norm();
                        normal += c.weight * voxel_normal(voxel, &(origin + dir * c.t_mid));
                    });
                    let valid = alpha > 0.0 && alpha >= cfg.alpha_valid_min;
                    PixelSample {
                        color: color.map(|c| c as f32),
                        alpha: alpha as f32,
                        depth: valid.then(|| (depth / alpha) as f32),
                        normal: if valid {
                            normal
                                .try_normalize(1e-12)
                                .map(|n| [n.x as f32, n.y as f32, n.z as f32])
                        } else {
                            None
                        },
                    }
                })
                .collect()
        })
        .collect();

    let mut out = RenderOutput {
        color: ImagePlane::new(w, h, 3),
        depth: ImagePlane::new(w, h, 1),
        alpha: ImagePlane::new(w, h, 1),
        normal: ImagePlane::new(w, h, 3),
    };
    for (v, row) in rows.into_iter().enumerate() {
        for (u, px) in row.into_iter().enumerate() {
            out.color.set(u, v, &px.color);
            out.alpha.set(u, v, &[px.alpha]);
            if let Some(d) = px.depth {
                out.depth.set(u, v, &[d]);
            }
            if let Some(n) = px.normal {
                out.normal.set(u, v, &n);
            }
        }
    }
    out
}

/// Composites one scalar per voxel (indexed in grid iteration order) the
/// same way [`render`] composites colour. Voxels with a `None` value
/// occlude but contribute zero.
pub fn render_scalar(
    index: &RenderIndex<'_>,
    values: &[Option<f64>],
    camera: &Camera,
    cfg: &RenderConfig,
) -> Result<ImagePlane> {
    cfg.validate()?;
    if values.len() != index.voxels().len() {
        return Err(Error::DimensionMismatch(format!(
            "{} per-voxel values for {} voxels",
            values.len(),
            index.voxels().len()
        )));
    }
    let (w, h) = (camera.width, camera.height);
    let origin = camera.center();
    let rows: Vec<Vec<f32>> = (0..h)
        .into_par_iter()
        .map(|v| {
            let mut hits = Vec::new();
            (0..w)
                .map(|u| {
                    let (_, dir) = camera.pixel_ray(u, v);
                    let mut acc = 0.0;
                    composite_ray(index, &origin, &dir, cfg, &mut hits, |c| {
                        acc += c.weight * values[c.voxel].unwrap_or(0.0);
                    });
                    acc as f32
                })
                .collect()
        })
        .collect();
    let mut out = ImagePlane::new(w, h, 1);
    for (v, row) in rows.into_iter().enumerate() {
        for (u, s) in row.into_iter().enumerate() {
            out.set(u, v, &[s]);
        }
    }
    Ok(out)
}
