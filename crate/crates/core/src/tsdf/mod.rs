//! Sparse truncated signed distance fields on the octree corner lattice.
//!
//! A field at level `l` stores samples at integer corner coordinates
//! `0..=2^l` per axis. Allocated corners start unobserved (`phi` is NaN,
//! weight 0) and become observed through depth integration, direct
//! assignment, or multi-level blending.

mod marching;

use rayon::prelude::*;

pub use marching::{extract_mesh, CASE_TABLE_SIZE};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::geom::{Aabb, Vec3};
use crate::grid::MAX_LEVEL;
use crate::image::DepthMap;

pub type CornerCoord = [u32; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerSample {
    /// Truncated signed distance in meters; NaN while unobserved.
    pub phi: f64,
    pub weight: f64,
}

impl CornerSample {
    pub const UNOBSERVED: CornerSample = CornerSample {
        phi: f64::NAN,
        weight: 0.0,
    };

    pub fn is_observed(&self) -> bool {
        !self.phi.is_nan()
    }
}

#[derive(Debug, Clone)]
pub struct TsdfField {
    level: u32,
    bounds: Aabb,
    trunc: f64,
    /// Sorted, unique.
    coords: Vec<CornerCoord>,
    samples: Vec<CornerSample>,
}

impl TsdfField {
    pub fn new(bounds: Aabb, level: u32, trunc: f64) -> Result<Self> {
        if level > MAX_LEVEL - 1 {
            return Err(Error::domain(format!("TSDF level {level} is too fine")));
        }
        if !(trunc > 0.0 && trunc.is_finite()) {
            return Err(Error::domain("truncation distance must be positive"));
        }
        let e = bounds.extent();
        if !(e.x > 0.0) || (e.x - e.y).abs() > 1e-9 * e.x || (e.x - e.z).abs() > 1e-9 * e.x {
            return Err(Error::domain("TSDF bounds must be a non-degenerate cube"));
        }
        Ok(TsdfField {
            level,
            bounds,
            trunc,
            coords: Vec::new(),
            samples: Vec::new(),
        })
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    pub fn trunc(&self) -> f64 {
        self.trunc
    }

    /// Voxel edge length at this level.
    pub fn edge(&self) -> f64 {
        self.bounds.extent().x / (1u64 << self.level) as f64
    }

    /// Largest valid corner coordinate per axis.
    pub fn max_coord(&self) -> u32 {
        1u32 << self.level
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn observed_count(&self) -> usize {
        self.samples.iter().filter(|s| s.is_observed()).count()
    }

    pub fn position(&self, c: &CornerCoord) -> Vec3 {
        self.bounds.min + Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64) * self.edge()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&CornerCoord, &CornerSample)> {
        self.coords.iter().zip(self.samples.iter())
    }

    pub fn coords(&self) -> &[CornerCoord] {
        &self.coords
    }

    pub fn samples(&self) -> &[CornerSample] {
        &self.samples
    }

    pub fn index_of(&self, c: &CornerCoord) -> Option<usize> {
        self.coords.binary_search(c).ok()
    }

    pub fn get(&self, c: &CornerCoord) -> Option<&CornerSample> {
        self.index_of(c).map(|i| &self.samples[i])
    }

    /// Sets an allocated or new corner to an observed value.
    pub fn set(&mut self, c: CornerCoord, phi: f64, weight: f64) -> Result<()> {
        if !(phi.abs() <= self.trunc) || !(weight > 0.0) {
            return Err(Error::domain(format!(
                "corner {c:?}: phi {phi} must lie within ±{} and weight {weight} be positive",
                self.trunc
            )));
        }
        self.allocate([c]);
        let i = self.index_of(&c).expect("just allocated");
        self.samples[i] = CornerSample { phi, weight };
        Ok(())
    }

    /// Marks a corner unobserved again (used to simulate missing data).
    pub fn clear(&mut self, c: &CornerCoord) {
        if let Some(i) = self.index_of(c) {
            self.samples[i] = CornerSample::UNOBSERVED;
        }
    }

    /// Adds unobserved corners; existing corners are kept as they are.
    pub fn allocate<I: IntoIterator<Item = CornerCoord>>(&mut self, corners: I) {
        let m = self.max_coord();
        let mut fresh: Vec<CornerCoord> = corners.into_iter().filter(|c| c.iter().all(|v| *v <= m)).collect();
        fresh.sort_unstable();
        fresh.dedup();
        fresh.retain(|c| self.coords.binary_search(c).is_err());
        if fresh.is_empty() {
            return;
        }
        let old_coords = std::mem::take(&mut self.coords);
        let old_samples = std::mem::take(&mut self.samples);
        let mut coords = Vec::with_capacity(old_coords.len() + fresh.len());
        let mut samples = Vec::with_capacity(coords.capacity());
        let (mut i, mut j) = (0, 0);
        while i < old_coords.len() || j < fresh.len() {
            if j >= fresh.len() || (i < old_coords.len() && old_coords[i] < fresh[j]) {
                coords.push(old_coords[i]);
                samples.push(old_samples[i]);
                i += 1;
            } else {
                coords.push(fresh[j]);
                samples.push(CornerSample::UNOBSERVED);
                j += 1;
            }
        }
        self.coords = coords;
        self.samples = samples;
    }

    /// Allocates every corner in the inclusive coordinate box `[lo, hi]`.
    pub fn allocate_box(&mut self, lo: CornerCoord, hi: CornerCoord) {
        let mut v = Vec::new();
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    v.push([x, y, z]);
                }
            }
        }
        self.allocate(v);
    }

    /// Allocates the corners of every cell within `±trunc` of the surface
    /// seen in each depth map, sampling each pixel ray at half-voxel steps.
    pub fn allocate_from_views<'a, I>(&mut self, views: I)
    where
        I: IntoIterator<Item = (&'a Camera, &'a DepthMap)>,
    {
        let edge = self.edge();
        let n = 1u64 << self.level;
        let min = self.bounds.min;
        let trunc = self.trunc;
        let mut cells: Vec<u64> = Vec::new();
        for (camera, depth) in views {
            let mut view_cells: Vec<u64> = (0..camera.height)
                .into_par_iter()
                .flat_map_iter(|v| {
                    let mut row = Vec::new();
                    for u in 0..camera.width {
                        let Some(d) = depth.scalar(u, v) else { continue };
                        let d = d as f64;
                        if !(d > 0.0) {
                            continue;
                        }
                        let (o, dir) = camera.pixel_ray(u, v);
                        let steps = (2.0 * trunc / (0.5 * edge)).ceil() as usize;
                        for s in 0..=steps {
                            let t = d - trunc + s as f64 * 0.5 * edge;
                            if t <= 0.0 {
                                continue;
                            }
                            let c = (o + dir * t - min) / edge;
                            if c.iter().any(|x| *x < 0.0 || *x >= n as f64) {
                                continue;
                            }
                            row.push(c.x as u64 | (c.y as u64) << 21 | (c.z as u64) << 42);
                        }
                    }
                    row.sort_unstable();
                    row.dedup();
                    row
                })
                .collect();
            cells.append(&mut view_cells);
            cells.par_sort_unstable();
            cells.dedup();
        }
        let mask = (1u64 << 21) - 1;
        let corners: Vec<CornerCoord> = cells
            .iter()
            .flat_map(|c| {
                let base = [(c & mask) as u32, ((c >> 21) & mask) as u32, (c >> 42) as u32];
                crate::grid::CORNER_OFFSETS
                    .iter()
                    .map(move |o| [base[0] + o[0], base[1] + o[1], base[2] + o[2]])
            })
            .collect();
        self.allocate(corners);
    }

    /// Projective TSDF update from one posed depth map.
    ///
    /// Every allocated corner that projects into a valid pixel gets the
    /// signed distance `sd = depth - range` (range = distance from the camera
    /// center). Corners with `sd <= -trunc` are left untouched; the rest
    /// take a running mean of `clamp(sd, ±trunc)` with unit weight.
    pub fn integrate_depth(&mut self, camera: &Camera, depth: &DepthMap) -> Result<()> {
        if depth.width != camera.width || depth.height != camera.height {
            return Err(Error::DimensionMismatch(format!(
                "depth map {}x{} for a {}x{} camera",
                depth.width, depth.height, camera.width, camera.height
            )));
        }
        let trunc = self.trunc;
        let edge = self.edge();
        let min = self.bounds.min;
        let center = camera.center();
        self.coords
            .par_iter()
            .zip(self.samples.par_iter_mut())
            .for_each(|(c, s)| {
                let p = min + Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64) * edge;
                let Some((x, y, _)) = camera.project(&p) else { return };
                let Some((u, v)) = camera.pixel_of(x, y) else { return };
                let Some(d) = depth.scalar(u, v) else { return };
                let d = d as f64;
                if !(d > 0.0) {
                    return;
                }
                let sd = d - (p - center).norm();
                if sd <= -trunc {
                    return;
                }
                let sd = sd.clamp(-trunc, trunc);
                if s.is_observed() {
                    s.phi = (s.weight * s.phi + sd) / (s.weight + 1.0);
                    s.weight += 1.0;
                } else {
                    *s = CornerSample { phi: sd, weight: 1.0 };
                }
            });
        Ok(())
    }

    /// Sets every allocated corner from an analytic signed distance function.
    pub fn fill_from_sdf<F: Fn(&Vec3) -> f64 + Sync>(&mut self, sdf: F) {
        let (min, edge, trunc) = (self.bounds.min, self.edge(), self.trunc);
        self.coords
            .par_iter()
            .zip(self.samples.par_iter_mut())
            .for_each(|(c, s)| {
                let p = min + Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64) * edge;
                *s = CornerSample {
                    phi: sdf(&p).clamp(-trunc, trunc),
                    weight: 1.0,
                };
            });
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlendConfig {
    /// Quantile of observed fine weights used as the confidence pivot.
    pub tau_q: f64,
    /// Sigmoid temperature, relative to the pivot.
    pub temperature: f64,
}

impl Default for BlendConfig {
    fn default() -> Self {
        BlendConfig {
            tau_q: 0.3,
            temperature: 0.5,
        }
    }
}

/// Linear-interpolation quantile of an unsorted, non-empty slice.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Coarse corner closest to fine corner `c` when the levels differ by `shift`.
pub fn nearest_coarse(c: &CornerCoord, shift: u32) -> CornerCoord {
    let half = 1u32 << (shift - 1);
    c.map(|v| (v + half) >> shift)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Fills unobserved and low-confidence fine corners from progressively
/// coarser fields.
///
/// For each coarse field in order, the pivot `tau` is the `tau_q` quantile
/// of the observed fine weights. Each fine corner is paired with the
/// spatially nearest coarse corner (halfway ties round up) and blended
/// with `alpha = 0` when the fine value is missing, `alpha = 1` when the
/// coarse value is missing, and `sigmoid((w - tau) / (tau * temperature))`
/// otherwise. Blended values are clamped to the fine truncation band and
/// weights blend with the same `alpha`.
pub fn blend_multilevel(fine: &TsdfField, coarse_levels: &[TsdfField], cfg: &BlendConfig) -> Result<TsdfField> {
    if fine.is_empty() {
        return Err(Error::domain("cannot blend into an empty fine TSDF field"));
    }
    if !(cfg.tau_q > 0.0 && cfg.tau_q < 1.0) {
        return Err(Error::domain(format!("tau_q {} must lie in (0, 1)", cfg.tau_q)));
    }
    if !(cfg.temperature > 0.0) {
        return Err(Error::domain("temperature must be positive"));
    }
    for c in coarse_levels {
        if c.level >= fine.level {
            return Err(Error::domain(format!(
                "coarse level {} is not coarser than fine level {}",
                c.level, fine.level
            )));
        }
        if c.bounds != fine.bounds {
            return Err(Error::domain("coarse and fine fields cover different bounds"));
        }
    }
    let mut out = fine.clone();
    let trunc = fine.trunc;
    for coarse in coarse_levels {
        let observed: Vec<f64> = out
            .samples
            .iter()
            .filter(|s| s.is_observed())
            .map(|s| s.weight)
            .collect();
        let tau = (!observed.is_empty()).then(|| quantile(&observed, cfg.tau_q));
        let shift = fine.level - coarse.level;
        out.coords
            .par_iter()
            .zip(out.samples.par_iter_mut())
            .for_each(|(c, s)| {
                let cc = nearest_coarse(c, shift);
                let coarse_sample = coarse.get(&cc).copied().unwrap_or(CornerSample::UNOBSERVED);
                if !s.is_observed() {
                    if coarse_sample.is_observed() {
                        *s = CornerSample {
                            phi: coarse_sample.phi.clamp(-trunc, trunc),
                            weight: coarse_sample.weight,
                        };
                    }
                    return;
                }
                if !coarse_sample.is_observed() {
                    return;
                }
                let tau = tau.expect("an observed fine corner exists");
                let alpha = sigmoid((s.weight - tau) / (tau * cfg.temperature));
                s.phi = (alpha * s.phi + (1.0 - alpha) * coarse_sample.phi).clamp(-trunc, trunc);
                s.weight = alpha * s.weight + (1.0 - alpha) * coarse_sample.weight;
            });
    }
    Ok(out)
}
