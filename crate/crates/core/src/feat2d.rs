//! Dense feature reconstruction: Gaussian-window stitching of overlapping
//! crop features and thresholded-cosine token aggregation.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::FeatureMap;

/// Feature plane of one crop, placed at `anchor` (top-left pixel) in the
/// full image.
#[derive(Debug, Clone, PartialEq)]
pub struct CropFeature {
    pub anchor: (usize, usize),
    pub feature: FeatureMap,
}

/// Blends crops with a Gaussian window centered on each crop.
///
/// `sigma_g` is the window bandwidth in pixels; `None` uses a quarter of
/// the crop extent along each axis. Invalid crop pixels do not contribute.
pub fn gaussian_window_blend(
    crops: &[CropFeature],
    out_width: usize,
    out_height: usize,
    sigma_g: Option<f64>,
    eps: f64,
) -> Result<FeatureMap> {
    let Some(first) = crops.first() else {
        return Err(Error::Coverage { x: 0, y: 0 });
    };
    let dim = first.feature.channels;
    for (k, c) in crops.iter().enumerate() {
        if c.feature.channels != dim {
            return Err(Error::DimensionMismatch(format!(
                "crop {k} has {} channels, crop 0 has {dim}",
                c.feature.channels
            )));
        }
        let (x, y) = c.anchor;
        if x + c.feature.width > out_width || y + c.feature.height > out_height {
            return Err(Error::domain(format!("crop {k} extends past the image")));
        }
        if c.feature.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain(format!("crop {k} has non-finite features")));
        }
        if let Some(s) = sigma_g {
            if !(s > 0.0) {
                return Err(Error::domain("sigma_g must be positive"));
            }
        }
    }
    if !(eps >= 0.0) {
        return Err(Error::domain("eps must be non-negative"));
    }

    // separable window per crop
    let windows: Vec<(Vec<f64>, Vec<f64>)> = crops
        .iter()
        .map(|c| {
            let axis = |n: usize| {
                let s = sigma_g.unwrap_or(n as f64 / 4.0);
                (0..n)
                    .map(|i| {
                        let d = i as f64 + 0.5 - n as f64 / 2.0;
                        (-d * d / (2.0 * s * s)).exp()
                    })
                    .collect::<Vec<f64>>()
            };
            (axis(c.feature.width), axis(c.feature.height))
        })
        .collect();

    let rows: Vec<Result<(Vec<f32>, Vec<bool>)>> = (0..out_height)
        .into_par_iter()
        .map(|y| {
            let mut values = vec![0f32; out_width * dim];
            let mut acc = vec![0f64; dim];
            for x in 0..out_width {
                acc.fill(0.0);
                let mut wsum = 0.0;
                let mut covered = false;
                for (c, (gx, gy)) in crops.iter().zip(&windows) {
                    let (ax, ay) = c.anchor;
                    if x < ax || y < ay || x >= ax + c.feature.width || y >= ay + c.feature.height {
                        continue;
                    }
                    let (lx, ly) = (x - ax, y - ay);
                    if !c.feature.is_valid(lx, ly) {
                        continue;
                    }
                    covered = true;
                    let w = gx[lx] * gy[ly];
                    wsum += w;
                    for (a, f) in acc.iter_mut().zip(c.feature.pixel(lx, ly)) {
                        *a += w * *f as f64;
                    }
                }
                if !covered {
                    return Err(Error::Coverage { x, y });
                }
                let denom = wsum + eps;
                for (o, a) in values[x * dim..(x + 1) * dim].iter_mut().zip(&acc) {
                    *o = (a / denom) as f32;
                }
            }
            Ok((values, vec![true; out_width]))
        })
        .collect();

    let mut out = FeatureMap::new(out_width, out_height, dim);
    for (y, row) in rows.into_iter().enumerate() {
        let (values, valid) = row?;
        let start = y * out_width;
        out.values[start * dim..(start + out_width) * dim].copy_from_slice(&values);
        out.valid[start..start + out_width].copy_from_slice(&valid);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    /// Token pairs with cosine at or below this value get zero weight.
    pub cos_threshold: f64,
    pub iterations: usize,
    pub token_stride: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            cos_threshold: 0.0,
            iterations: 2,
            token_stride: 4,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..1.0).contains(&self.cos_threshold) {
            return Err(Error::domain("cos_threshold must lie in [-1, 1)"));
        }
        if self.iterations < 1 || self.token_stride < 1 {
            return Err(Error::domain("iterations and token_stride must be >= 1"));
        }
        Ok(())
    }
}

/// Row sums at or below this are treated as fully masked.
const ROW_EPS: f64 = 1e-12;

/// Lattice positions along an axis of length `n`: every `stride` pixels
/// plus the last pixel.
fn lattice(n: usize, stride: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).step_by(stride).collect();
    if n > 0 && v.last() != Some(&(n - 1)) {
        v.push(n - 1);
    }
    v
}

struct Tokens {
    xs: Vec<usize>,
    ys: Vec<usize>,
    dim: usize,
    /// Row-major over (ys, xs); `None` on invalid pixels.
    values: Vec<Option<Vec<f64>>>,
}

impl Tokens {
    fn gather(feat: &FeatureMap, stride: usize) -> Self {
        let xs = lattice(feat.width, stride);
        let ys = lattice(feat.height, stride);
        let values = ys
            .iter()
            .flat_map(|&y| xs.iter().map(move |&x| (x, y)))
            .map(|(x, y)| {
                feat.is_valid(x, y)
                    .then(|| feat.pixel(x, y).iter().map(|v| *v as f64).collect())
            })
            .collect();
        Tokens {
            xs,
            ys,
            dim: feat.channels,
            values,
        }
    }

    /// One pass of thresholded-cosine aggregation over all valid tokens.
    fn aggregate(&mut self, threshold: f64) -> Result<()> {
        let live: Vec<usize> = (0..self.values.len()).filter(|i| self.values[*i].is_some()).collect();
        let mut units = Vec::with_capacity(live.len());
        for &i in &live {
            let v = self.values[i].as_ref().expect("live");
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(n > 0.0) || !n.is_finite() {
                let (x, y) = (self.xs[i % self.xs.len()], self.ys[i / self.xs.len()]);
                return Err(Error::DegenerateFeature(format!(
                    "token at pixel ({x}, {y}) has norm {n}"
                )));
            }
            units.push(v.iter().map(|x| x / n).collect::<Vec<f64>>());
        }
        let raw: Vec<&Vec<f64>> = live.iter().map(|&i| self.values[i].as_ref().expect("live")).collect();
        let dim = self.dim;
        let updated: Vec<Option<Vec<f64>>> = units
            .par_iter()
            .map(|ui| {
                let mut acc = vec![0.0; dim];
                let mut sum = 0.0;
                for (uj, rj) in units.iter().zip(&raw) {
                    let c: f64 = ui.iter().zip(uj).map(|(a, b)| a * b).sum();
                    if c > threshold {
                        sum += c;
                        for (a, r) in acc.iter_mut().zip(rj.iter()) {
                            *a += c * r;
                        }
                    }
                }
                (sum > ROW_EPS).then(|| acc.into_iter().map(|a| a / sum).collect())
            })
            .collect();
        for (&i, u) in live.iter().zip(updated) {
            if let Some(u) = u {
                self.values[i] = Some(u);
            }
        }
        Ok(())
    }

    /// Writes tokens back: lattice pixels take their token, other pixels
    /// the bilinear blend of the surrounding valid tokens.
    fn splat(&self, feat: &FeatureMap) -> FeatureMap {
        let (w, dim) = (feat.width, self.dim);
        let bracket = |lat: &[usize], p: usize| -> (usize, usize, f64) {
            let i = lat.partition_point(|&q| q <= p) - 1;
            if i + 1 >= lat.len() || lat[i] == p {
                return (i, i, 0.0);
            }
            (i, i + 1, (p - lat[i]) as f64 / (lat[i + 1] - lat[i]) as f64)
        };
        let rows: Vec<Vec<f32>> = (0..feat.height)
            .into_par_iter()
            .map(|y| {
                let mut row = feat.values[y * w * dim..(y + 1) * w * dim].to_vec();
                let (y0, y1, ty) = bracket(&self.ys, y);
                for x in 0..w {
                    if !feat.is_valid(x, y) {
                        continue;
                    }
                    let (x0, x1, tx) = bracket(&self.xs, x);
                    let taps = [
                        (y0, x0, (1.0 - tx) * (1.0 - ty)),
                        (y0, x1, tx * (1.0 - ty)),
                        (y1, x0, (1.0 - tx) * ty),
                        (y1, x1, tx * ty),
                    ];
                    let mut acc = vec![0.0; dim];
                    let mut wsum = 0.0;
                    for (ty_i, tx_i, wt) in taps {
                        if wt == 0.0 {
                            continue;
                        }
                        if let Some(v) = &self.values[ty_i * self.xs.len() + tx_i] {
                            wsum += wt;
                            for (a, t) in acc.iter_mut().zip(v) {
                                *a += wt * t;
                            }
                        }
                    }
                    if wsum > 0.0 {
                        for (o, a) in row[x * dim..(x + 1) * dim].iter_mut().zip(&acc) {
                            *o = (a / wsum) as f32;
                        }
                    }
                }
                row
            })
            .collect();
        let mut out = feat.clone();
        for (y, row) in rows.into_iter().enumerate() {
            out.values[y * w * dim..(y + 1) * w * dim].copy_from_slice(&row);
        }
        out
    }
}

fn attend(feat: &FeatureMap, cfg: &AttentionConfig, passes: usize) -> Result<FeatureMap> {
    cfg.validate()?;
    let mut tokens = Tokens::gather(feat, cfg.token_stride);
    for _ in 0..passes {
        tokens.aggregate(cfg.cos_threshold)?;
    }
    Ok(tokens.splat(feat))
}

/// Recursive thresholded-cosine aggregation (`cfg.iterations` passes).
pub fn scra(feat: &FeatureMap, cfg: &AttentionConfig) -> Result<FeatureMap> {
    attend(feat, cfg, cfg.iterations)
}

/// Single global pass of the same aggregation.
pub fn scga(feat: &FeatureMap, cfg: &AttentionConfig) -> Result<FeatureMap> {
    attend(feat, cfg, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ImagePlane;

    fn constant_crop(anchor: (usize, usize), w: usize, h: usize, v: &[f32]) -> CropFeature {
        CropFeature {
            anchor,
            feature: ImagePlane::filled(w, h, v),
        }
    }

    #[test]
    fn constant_crops_blend_to_the_constant() {
        let v = [0.25f32, -3.0, 7.5];
        let crops: Vec<CropFeature> = [(0, 0), (8, 0), (0, 8), (8, 8), (4, 4)]
            .into_iter()
            .map(|a| constant_crop(a, 16, 16, &v))
            .collect();
        let out = gaussian_window_blend(&crops, 24, 24, None, 1e-8).unwrap();
        for y in 0..24 {
            for x in 0..24 {
                for (o, e) in out.pixel(x, y).iter().zip(&v) {
                    assert!((o - e).abs() <= 1e-6 * e.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn single_full_crop_is_reproduced() {
        let feat = ImagePlane::from_fn(10, 6, 2, |x, y| Some(vec![x as f32, (y * y) as f32 - 3.0]));
        let crop = CropFeature {
            anchor: (0, 0),
            feature: feat.clone(),
        };
        let out = gaussian_window_blend(&[crop], 10, 6, None, 1e-8).unwrap();
        for (a, b) in out.values.iter().zip(&feat.values) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn two_overlapping_crops_weighted_sum() {
        let a = constant_crop((0, 0), 8, 8, &[1.0]);
        let b = constant_crop((4, 0), 8, 8, &[5.0]);
        let out = gaussian_window_blend(&[a, b], 12, 8, None, 1e-8).unwrap();
        let g = |local: usize, n: usize| {
            let s = n as f64 / 4.0;
            let d = local as f64 + 0.5 - n as f64 / 2.0;
            (-d * d / (2.0 * s * s)).exp()
        };
        let (x, y) = (6, 3);
        let g1 = g(x, 8) * g(y, 8);
        let g2 = g(x - 4, 8) * g(y, 8);
        let expected = (g1 * 1.0 + g2 * 5.0) / (g1 + g2 + 1e-8);
        assert!((out.pixel(x, y)[0] as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn uncovered_pixel_is_reported() {
        let a = constant_crop((0, 0), 4, 4, &[1.0]);
        let err = gaussian_window_blend(&[a], 5, 4, None, 1e-8).unwrap_err();
        assert!(matches!(err, Error::Coverage { x: 4, y: 0 }));
    }

    #[test]
    fn constant_map_is_a_fixed_point() {
        let v = [0.3f32, -0.2, 0.9, 0.1];
        let feat = ImagePlane::filled(13, 9, &v);
        let cfg = AttentionConfig::default();
        for out in [scra(&feat, &cfg).unwrap(), scga(&feat, &cfg).unwrap()] {
            for (a, b) in out.values.iter().zip(&feat.values) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    /// Left half along e0, right half along e1, with varying magnitudes.
    fn two_cluster_map() -> FeatureMap {
        ImagePlane::from_fn(6, 4, 3, |x, y| {
            let s = 1.0 + 0.3 * x as f32 + 0.1 * y as f32;
            Some(if x < 3 { vec![s, 0.0, 0.0] } else { vec![0.0, s, 0.0] })
        })
    }

    #[test]
    fn orthogonal_clusters_collapse_to_their_means() {
        let feat = two_cluster_map();
        let cfg = AttentionConfig {
            cos_threshold: 0.0,
            iterations: 1,
            token_stride: 1,
        };
        let out = scra(&feat, &cfg).unwrap();
        let mean = |left: bool| {
            let mut s = 0.0;
            let mut n = 0.0;
            for y in 0..4 {
                for x in 0..6 {
                    if (x < 3) == left {
                        s += feat.pixel(x, y)[if left { 0 } else { 1 }] as f64;
                        n += 1.0;
                    }
                }
            }
            s / n
        };
        let (ml, mr) = (mean(true), mean(false));
        for y in 0..4 {
            for x in 0..6 {
                let p = out.pixel(x, y);
                let expected = if x < 3 { [ml, 0.0, 0.0] } else { [0.0, mr, 0.0] };
                for (a, b) in p.iter().zip(expected) {
                    assert!((*a as f64 - b).abs() < 1e-6);
                }
            }
        }
        // the cluster means are a fixed point of the global pass
        let again = scga(&out, &cfg).unwrap();
        for (a, b) in again.values.iter().zip(&out.values) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn fully_masked_tokens_are_unchanged() {
        let feat = ImagePlane::from_fn(2, 1, 2, |x, _| {
            Some(if x == 0 { vec![1.0, 0.2] } else { vec![-1.0, 0.1] })
        });
        let cfg = AttentionConfig {
            cos_threshold: 0.5,
            iterations: 3,
            token_stride: 1,
        };
        assert_eq!(scra(&feat, &cfg).unwrap(), feat);
    }

    #[test]
    fn zero_token_is_degenerate() {
        let feat = ImagePlane::from_fn(4, 4, 2, |x, y| {
            Some(if (x, y) == (0, 0) {
                vec![0.0, 0.0]
            } else {
                vec![1.0, 1.0]
            })
        });
        let r = scra(&feat, &AttentionConfig::default());
        assert!(matches!(r, Err(Error::DegenerateFeature(_))));
    }

    #[test]
    fn off_lattice_pixels_interpolate_tokens() {
        let feat = ImagePlane::from_fn(9, 1, 1, |x, _| Some(vec![1.0 + x as f32]));
        // threshold above any off-diagonal cosine keeps tokens fixed
        let cfg = AttentionConfig {
            cos_threshold: 0.999_999,
            iterations: 1,
            token_stride: 4,
        };
        let out = scra(&feat, &cfg).unwrap();
        // 1D positive scalars all have cosine 1, so every token becomes the lattice mean
        let m = (1.0 + 5.0 + 9.0) / 3.0;
        for x in 0..9 {
            assert!((out.pixel(x, 0)[0] - m as f32).abs() < 1e-6);
        }
    }

    #[test]
    fn lattice_includes_last_pixel() {
        assert_eq!(lattice(9, 4), vec![0, 4, 8]);
        assert_eq!(lattice(10, 4), vec![0, 4, 8, 9]);
        assert_eq!(lattice(1, 4), vec![0]);
    }
}
