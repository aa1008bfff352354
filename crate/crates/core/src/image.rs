//! Row-major multi-channel image planes with a per-pixel validity mask.

use crate::error::{Error, Result};

/// A `width x height` plane of `channels` f32 values per pixel.
///
/// Invalid pixels hold the sentinel value 0 in every channel and are
/// skipped by every reduction in the crate.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub values: Vec<f32>,
    pub valid: Vec<bool>,
}

pub type DepthMap = ImagePlane;
pub type AlphaMap = ImagePlane;
pub type ConfidenceMap = ImagePlane;
pub type ColorMap = ImagePlane;
pub type NormalMap = ImagePlane;
pub type FeatureMap = ImagePlane;

impl ImagePlane {
    /// All-invalid plane.
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        ImagePlane {
            width,
            height,
            channels,
            values: vec![0.0; width * height * channels],
            valid: vec![false; width * height],
        }
    }

    /// Plane with every pixel valid and set to `value`.
    pub fn filled(width: usize, height: usize, value: &[f32]) -> Self {
        let channels = value.len();
        let mut values = Vec::with_capacity(width * height * channels);
        for _ in 0..width * height {
            values.extend_from_slice(value);
        }
        ImagePlane {
            width,
            height,
            channels,
            values,
            valid: vec![true; width * height],
        }
    }

    pub fn from_fn<F>(width: usize, height: usize, channels: usize, mut f: F) -> Self
    where
        F: FnMut(usize, usize) -> Option<Vec<f32>>,
    {
        let mut plane = ImagePlane::new(width, height, channels);
        for y in 0..height {
            for x in 0..width {
                if let Some(v) = f(x, y) {
                    plane.set(x, y, &v);
                }
            }
        }
        plane
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[self.index(x, y)]
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = self.index(x, y) * self.channels;
        &self.values[i..i + self.channels]
    }

    /// Scalar value of a valid pixel in a single-channel plane.
    #[inline]
    pub fn scalar(&self, x: usize, y: usize) -> Option<f32> {
        let i = self.index(x, y);
        self.valid[i].then(|| self.values[i * self.channels])
    }

    pub fn set(&mut self, x: usize, y: usize, value: &[f32]) {
        debug_assert_eq!(value.len(), self.channels);
        let i = self.index(x, y);
        self.valid[i] = true;
        self.values[i * self.channels..(i + 1) * self.channels].copy_from_slice(value);
    }

    pub fn invalidate(&mut self, x: usize, y: usize) {
        let i = self.index(x, y);
        self.valid[i] = false;
        self.values[i * self.channels..(i + 1) * self.channels].fill(0.0);
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn check_same_size(&self, other: &ImagePlane, what: &str) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// Bilinear sample at a continuous image point, where pixel `(u, v)` has
    /// its center at `(u + 0.5, v + 0.5)`. Invalid neighbours are dropped and
    /// the remaining weights renormalised; `None` when no neighbour is valid
    /// or the point lies outside the image.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<Vec<f64>> {
        if !(x >= 0.0 && y >= 0.0 && x <= self.width as f64 && y <= self.height as f64) {
            return None;
        }
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = fx - x0 as f64;
        let ty = fy - y0 as f64;
        let taps = [
            (x0, y0, (1.0 - tx) * (1.0 - ty)),
            (x1, y0, tx * (1.0 - ty)),
            (x0, y1, (1.0 - tx) * ty),
            (x1, y1, tx * ty),
        ];
        let mut out = vec![0.0; self.channels];
        let mut wsum = 0.0;
        for (px, py, w) in taps {
            if w == 0.0 || !self.is_valid(px, py) {
                continue;
            }
            wsum += w;
            for (o, v) in out.iter_mut().zip(self.pixel(px, py)) {
                *o += w * *v as f64;
            }
        }
        if wsum <= 0.0 {
            return None;
        }
        out.iter_mut().for_each(|o| *o /= wsum);
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_hits_pixel_centers_exactly() {
        let img = ImagePlane::from_fn(3, 2, 1, |x, y| Some(vec![(x + 10 * y) as f32]));
        assert_eq!(img.sample_bilinear(1.5, 1.5).unwrap(), vec![11.0]);
        let mid = img.sample_bilinear(1.0, 0.5).unwrap()[0];
        assert!((mid - 0.5).abs() < 1e-12);
    }

    #[test]
    fn bilinear_skips_invalid_neighbours() {
        let mut img = ImagePlane::filled(2, 1, &[4.0]);
        img.invalidate(1, 0);
        assert_eq!(img.sample_bilinear(1.0, 0.5).unwrap(), vec![4.0]);
        img.invalidate(0, 0);
        assert!(img.sample_bilinear(1.0, 0.5).is_none());
    }
}
