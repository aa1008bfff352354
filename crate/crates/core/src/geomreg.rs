//! Geometric consistency metrics between rendered and prior maps.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{DepthMap, ImagePlane, NormalMap};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchSpec {
    pub size: usize,
    pub stride: usize,
    /// Floor on the per-patch standard deviation.
    pub eps_std: f64,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec {
            size: 8,
            stride: 8,
            eps_std: 1e-6,
        }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 2 || self.stride < 1 || !(self.eps_std > 0.0) {
            return Err(Error::domain(format!(
                "patch size {} must be >= 2, stride {} >= 1 and eps_std {} > 0",
                self.size, self.stride, self.eps_std
            )));
        }
        Ok(())
    }
}

fn require_same_size(a: &ImagePlane, b: &ImagePlane) -> Result<()> {
    if a.width != b.width || a.height != b.height || a.channels != b.channels {
        return Err(Error::domain(format!(
            "map sizes differ: {}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

fn standardize(values: &mut [f64], eps_std: f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(eps_std);
    for v in values.iter_mut() {
        *v = (*v - mean) / std;
    }
}

/// Mean over fully valid patches of the squared L2 distance between the
/// standardized depths of the two maps.
pub fn patch_depth_loss(d_ren: &DepthMap, d_prior: &DepthMap, spec: &PatchSpec) -> Result<f64> {
    spec.validate()?;
    require_same_size(d_ren, d_prior)?;
    let (w, h, s) = (d_ren.width, d_ren.height, spec.size);
    if w < s || h < s {
        return Err(Error::EmptyDomain("image is smaller than one patch".into()));
    }
    let origins: Vec<(usize, usize)> = (0..=h - s)
        .step_by(spec.stride)
        .flat_map(|y| (0..=w - s).step_by(spec.stride).map(move |x| (x, y)))
        .collect();
    let losses: Vec<Option<f64>> = origins
        .par_iter()
        .map(|&(x0, y0)| {
            let mut a = Vec::with_capacity(s * s);
            let mut b = Vec::with_capacity(s * s);
            for y in y0..y0 + s {
                for x in x0..x0 + s {
                    a.push(d_ren.scalar(x, y)? as f64);
                    b.push(d_prior.scalar(x, y)? as f64);
                }
            }
            standardize(&mut a, spec.eps_std);
            standardize(&mut b, spec.eps_std);
            Some(a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum())
        })
        .collect();
    let used: Vec<f64> = losses.into_iter().flatten().collect();
    if used.is_empty() {
        return Err(Error::EmptyDomain("no fully valid patch".into()));
    }
    Ok(used.iter().sum::<f64>() / used.len() as f64)
}

/// Mean of `1 - n_ren . n_prior` over pixels valid in both maps.
pub fn normal_loss(n_ren: &NormalMap, n_prior: &NormalMap) -> Result<f64> {
    require_same_size(n_ren, n_prior)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for v in 0..n_ren.height {
        for u in 0..n_ren.width {
            if !(n_ren.is_valid(u, v) && n_prior.is_valid(u, v)) {
                continue;
            }
            let dot: f64 = n_ren
                .pixel(u, v)
                .iter()
                .zip(n_prior.pixel(u, v))
                .map(|(a, b)| *a as f64 * *b as f64)
                .sum();
            sum += 1.0 - dot;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyDomain("no pixel is valid in both normal maps".into()));
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn depth(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> DepthMap {
        ImagePlane::from_fn(w, h, 1, |u, v| Some(vec![f(u, v) as f32]))
    }

    fn two_by_two(vals: [f32; 4]) -> DepthMap {
        ImagePlane::from_fn(2, 2, 1, |u, v| Some(vec![vals[v * 2 + u]]))
    }

    #[test]
    fn hand_computed_two_by_two_patch() {
        let spec = PatchSpec {
            size: 2,
            stride: 2,
            eps_std: 1e-6,
        };
        let loss = patch_depth_loss(
            &two_by_two([1.0, 2.0, 3.0, 4.0]),
            &two_by_two([1.0, 2.0, 3.0, 5.0]),
            &spec,
        )
        .unwrap();
        // independent evaluation with population statistics
        let z = |v: [f64; 4]| {
            let m = v.iter().sum::<f64>() / 4.0;
            let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 4.0).sqrt();
            v.map(|x| (x - m) / s)
        };
        let (a, b) = (z([1.0, 2.0, 3.0, 4.0]), z([1.0, 2.0, 3.0, 5.0]));
        let expected: f64 = (0..4).map(|i| (a[i] - b[i]).powi(2)).sum();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.138_339).abs() < 1e-6, "{loss}");
    }

    #[test]
    fn partially_invalid_patches_are_skipped() {
        let a = depth(4, 2, |u, v| (u + 3 * v) as f64);
        let mut b = depth(4, 2, |u, v| (u * u + v) as f64);
        b.invalidate(0, 0);
        let spec = PatchSpec {
            size: 2,
            stride: 2,
            eps_std: 1e-6,
        };
        let only_right = patch_depth_loss(&a, &b, &spec).unwrap();
        let mut a2 = a.clone();
        a2.invalidate(1, 1);
        assert_eq!(patch_depth_loss(&a2, &b, &spec).unwrap(), only_right);
        let mut none = b.clone();
        none.invalidate(2, 0);
        assert!(matches!(patch_depth_loss(&a, &none, &spec), Err(Error::EmptyDomain(_))));
    }

    #[test]
    fn size_mismatch_is_a_domain_error() {
        let spec = PatchSpec::default();
        let r = patch_depth_loss(&depth(8, 8, |_, _| 1.0), &depth(9, 8, |_, _| 1.0), &spec);
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    fn normals(n: [f32; 3]) -> NormalMap {
        ImagePlane::from_fn(5, 4, 3, |_, _| Some(n.to_vec()))
    }

    #[test]
    fn normal_loss_boundary_values() {
        let z = normals([0.0, 0.0, 1.0]);
        assert_eq!(normal_loss(&z, &z).unwrap(), 0.0);
        assert_eq!(normal_loss(&z, &normals([0.0, 0.0, -1.0])).unwrap(), 2.0);
        assert_eq!(normal_loss(&z, &normals([1.0, 0.0, 0.0])).unwrap(), 1.0);
        let mut empty = z.clone();
        for v in 0..4 {
            for u in 0..5 {
                empty.invalidate(u, v);
            }
        }
        assert!(normal_loss(&z, &empty).is_err());
    }

    fn random_depth(seed: u64, w: usize, h: usize) -> DepthMap {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f64> = (0..w * h).map(|_| rng.random_range(1.0..5.0)).collect();
        depth(w, h, |u, v| vals[v * w + u])
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn patch_loss_is_nonnegative_symmetric_and_affine_invariant(
            seed in any::<u64>(), a in 0.2f64..5.0, b in -3.0f64..3.0
        ) {
            let spec = PatchSpec::default();
            let d = random_depth(seed, 24, 16);
            let p = random_depth(seed ^ 0x5555, 24, 16);
            let l = patch_depth_loss(&d, &p, &spec).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert!((l - patch_depth_loss(&p, &d, &spec).unwrap()).abs() < 1e-9);
            let scaled = depth(24, 16, |u, v| a * d.scalar(u, v).unwrap() as f64 + b);
            prop_assert!(patch_depth_loss(&d, &scaled, &spec).unwrap() < 1e-6);
        }

        #[test]
        fn losses_shrink_along_the_interpolation_path(seed in any::<u64>()) {
            let spec = PatchSpec::default();
            let d = random_depth(seed, 16, 16);
            let p = random_depth(seed.wrapping_add(1), 16, 16);
            let mut last = f64::INFINITY;
            for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
                let mix = depth(16, 16, |u, v| {
                    let (x, y) = (d.scalar(u, v).unwrap() as f64, p.scalar(u, v).unwrap() as f64);
                    (1.0 - t) * x + t * y
                });
                let l = patch_depth_loss(&mix, &p, &spec).unwrap();
                prop_assert!(l <= last + 1e-9);
                last = l;
            }
        }

        #[test]
        fn normal_loss_is_bounded_and_rotation_invariant(
            seed in any::<u64>(), axis in prop::array::uniform3(-1.0f64..1.0), angle in 0.0f64..6.0
        ) {
            use rand::{Rng, SeedableRng};
            use nalgebra::{Rotation3, Unit, Vector3};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut draw = || {
                let v = Vector3::new(
                    rng.random_range(-1.0..1.0f64),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                v.normalize()
            };
            let a: Vec<Vector3<f64>> = (0..12).map(|_| draw()).collect();
            let b: Vec<Vector3<f64>> = (0..12).map(|_| draw()).collect();
            let axis = Vector3::from(axis);
            prop_assume!(axis.norm() > 1e-3);
            let r = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
            let map = |v: &[Vector3<f64>], rot: bool| ImagePlane::from_fn(4, 3, 3, |u, y| {
                let n = if rot { r * v[y * 4 + u] } else { v[y * 4 + u] };
                Some(vec![n.x as f32, n.y as f32, n.z as f32])
            });
            let l = normal_loss(&map(&a, false), &map(&b, false)).unwrap();
            prop_assert!((-1e-6..=2.0 + 1e-6).contains(&l));
            let lr = normal_loss(&map(&a, true), &map(&b, true)).unwrap();
            prop_assert!((l - lr).abs() < 1e-5);
        }
    }
}
