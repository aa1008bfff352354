//! Synthetic scenes with analytic geometry, used as test oracles.
//!
//! Primitives are intersected exactly per pixel ray (hits outside the
//! scene bounds are ignored). Each class has an orthonormal prototype
//! feature; pixels get their class prototype plus Gaussian noise, and
//! pixels that see nothing get a separate background prototype.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, Pose};
use crate::error::{Error, Result};
use crate::feat2d::CropFeature;
use crate::geom::{Aabb, Vec3};
use crate::image::ImagePlane;
use crate::io::scene::{LabeledPoints, Scene, SceneView};
use crate::query::QueryEmbedding;

const HIT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    /// Box rotated by `yaw_deg` about the vertical (z) axis.
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
        #[serde(default)]
        yaw_deg: f64,
    },
    /// Half-space boundary `normal . p = offset`; the solid side is
    /// `normal . p < offset`.
    Plane {
        normal: [f64; 3],
        offset: f64,
    },
}

/// Rotation taking box-local coordinates to world.
fn yaw_rotation(yaw_deg: f64) -> nalgebra::Rotation3<f64> {
    nalgebra::Rotation3::from_axis_angle(&Vec3::z_axis(), yaw_deg.to_radians())
}

impl Shape {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Shape::Sphere { radius, .. } => *radius > 0.0,
            Shape::Box { half_extents, .. } => half_extents.iter().all(|h| *h > 0.0),
            Shape::Plane { normal, .. } => Vec3::from(*normal).norm() > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!("degenerate primitive {self:?}")))
        }
    }

    /// Signed distance, negative inside.
    pub fn sdf(&self, p: &Vec3) -> f64 {
        match self {
            Shape::Sphere { center, radius } => (p - Vec3::from(*center)).norm() - radius,
            Shape::Box {
                center,
                half_extents,
                yaw_deg,
            } => {
                let local = yaw_rotation(*yaw_deg).inverse() * (p - Vec3::from(*center));
                let q = local.abs() - Vec3::from(*half_extents);
                q.map(|v| v.max(0.0)).norm() + q.max().min(0.0)
            }
            Shape::Plane { normal, offset } => {
                let n = Vec3::from(*normal);
                (n.dot(p) - offset) / n.norm()
            }
        }
    }

    /// Nearest hit `(t, outward unit normal)` with `t > 0` of a ray with
    /// unit direction.
    pub fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<(f64, Vec3)> {
        match self {
            Shape::Sphere { center, radius } => {
                let c = Vec3::from(*center);
                let oc = o - c;
                let b = oc.dot(d);
                let disc = b * b - (oc.norm_squared() - radius * radius);
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t = if -b - s > HIT_EPS { -b - s } else { -b + s };
                (t > HIT_EPS).then(|| (t, (o + d * t - c).normalize()))
            }
            Shape::Box {
                center,
                half_extents,
                yaw_deg,
            } => {
                let rot = yaw_rotation(*yaw_deg);
                let lo = rot.inverse() * (o - Vec3::from(*center));
                let ld = rot.inverse() * d;
                let h = Vec3::from(*half_extents);
                let (t0, t1) = Aabb::new(-h, h).line_interval(&lo, &ld)?;
                let t = if t0 > HIT_EPS { t0 } else { t1 };
                if t <= HIT_EPS {
                    return None;
                }
                let p = lo + ld * t;
                let r = p.component_div(&h).map(f64::abs);
                let axis = r.imax();
                let mut n = Vec3::zeros();
                n[axis] = p[axis].signum();
                Some((t, rot * n))
            }
            Shape::Plane { normal, offset } => {
                let n = Vec3::from(*normal);
                let denom = n.dot(d);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = (offset - n.dot(o)) / denom;
                (t > HIT_EPS).then(|| (t, n.normalize()))
            }
        }
    }

    /// Uniform sample on the surface part inside `bounds` (rejection
    /// sampling for planes; `None` when a draw misses the bounds).
    fn sample_surface<R: Rng>(&self, rng: &mut R, bounds: &Aabb) -> Option<Vec3> {
        match self {
            Shape::Sphere { center, radius } => {
                let v = Vec3::new(
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                );
                let n = v.norm();
                (n > 1e-12).then(|| Vec3::from(*center) + v * (radius / n))
            }
            Shape::Box {
                center,
                half_extents,
                yaw_deg,
            } => {
                let h = Vec3::from(*half_extents);
                let areas = [h.y * h.z, h.x * h.z, h.x * h.y];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.random::<f64>() * total;
                let mut axis = 2;
                for (a, area) in areas.iter().enumerate() {
                    if pick < *area {
                        axis = a;
                        break;
                    }
                    pick -= area;
                }
                let mut p = Vec3::new(
                    rng.random_range(-h.x..h.x),
                    rng.random_range(-h.y..h.y),
                    rng.random_range(-h.z..h.z),
                );
                p[axis] = if rng.random::<bool>() { h[axis] } else { -h[axis] };
                Some(yaw_rotation(*yaw_deg) * p + Vec3::from(*center))
            }
            Shape::Plane { normal, offset } => {
                let n = Vec3::from(*normal).normalize();
                let o = n * (offset / Vec3::from(*normal).norm());
                let a = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
                let u = n.cross(&a).normalize();
                let v = n.cross(&u);
                let c = bounds.center();
                let base = o + u * u.dot(&(c - o)) + v * v.dot(&(c - o));
                let r = bounds.extent().norm() / 2.0;
                let p = base + u * rng.random_range(-r..r) + v * rng.random_range(-r..r);
                bounds.contains(&p, 0.0).then_some(p)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthObject {
    pub name: String,
    pub class: usize,
    pub shape: Shape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrbitKind {
    /// Azimuth advancing by `turns` revolutions while elevation sweeps.
    Spiral,
    /// Fibonacci lattice over the elevation band.
    Fibonacci,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrbitSpec {
    pub kind: OrbitKind,
    pub views: usize,
    pub radius: f64,
    pub target: [f64; 3],
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub turns: f64,
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl OrbitSpec {
    pub fn cameras(&self) -> Result<Vec<Camera>> {
        let target = Vec3::from(self.target);
        let n = self.views;
        (0..n)
            .map(|i| {
                let (az, el) = match self.kind {
                    OrbitKind::Spiral => {
                        let f = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
                        let el = self.elevation_min_deg + f * (self.elevation_max_deg - self.elevation_min_deg);
                        (2.0 * PI * self.turns * i as f64 / n as f64, el.to_radians())
                    }
                    OrbitKind::Fibonacci => {
                        let golden = PI * (3.0 - 5f64.sqrt());
                        let (s0, s1) = (
                            self.elevation_min_deg.to_radians().sin(),
                            self.elevation_max_deg.to_radians().sin(),
                        );
                        let s = s0 + (s1 - s0) * (i as f64 + 0.5) / n as f64;
                        (golden * i as f64, s.asin())
                    }
                };
                let eye = target + Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * self.radius;
                let up = if el.cos().abs() < 1e-6 { Vec3::y() } else { Vec3::z() };
                Camera::with_fov(self.width, self.height, self.fov_deg, Pose::look_at(eye, target, up)?)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub size: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSceneSpec {
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    pub objects: Vec<SynthObject>,
    pub class_names: Vec<String>,
    pub dim: usize,
    /// Per-component standard deviation of the feature noise.
    pub noise_sigma: f64,
    pub orbit: OrbitSpec,
    pub level: u32,
    pub points_per_class: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crops: Option<CropSpec>,
}

impl SynthSceneSpec {
    pub fn bounds(&self) -> Aabb {
        Aabb::new(Vec3::from(self.bounds_min), Vec3::from(self.bounds_max))
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0..3).all(|k| self.bounds_max[k] > self.bounds_min[k]) {
            return Err(Error::domain(format!(
                "scene bounds {:?}..{:?} are empty along some axis",
                self.bounds_min, self.bounds_max
            )));
        }
        let bounds = self.bounds();
        for o in &self.objects {
            o.shape.validate()?;
            let center = match &o.shape {
                Shape::Sphere { center, .. } | Shape::Box { center, .. } => Some(Vec3::from(*center)),
                Shape::Plane { .. } => None,
            };
            if center.is_some_and(|c| !bounds.contains(&c, 0.0)) {
                return Err(Error::domain(format!(
                    "object '{}' lies outside the scene bounds",
                    o.name
                )));
            }
            if o.class >= self.class_count() {
                return Err(Error::domain(format!(
                    "object '{}' has unknown class {}",
                    o.name, o.class
                )));
            }
        }
        if self.dim < self.class_count() + 1 {
            return Err(Error::domain(format!(
                "feature dimension {} cannot hold {} class prototypes plus background",
                self.dim,
                self.class_count()
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::domain("noise sigma must be non-negative"));
        }
        if self.orbit.views == 0 {
            return Err(Error::domain("orbit needs at least one view"));
        }
        Ok(())
    }

    /// Class of the primitive nearest to `p` by signed distance.
    pub fn label_at(&self, p: &Vec3) -> Option<usize> {
        self.objects
            .iter()
            .map(|o| (o.shape.sdf(p), o.class))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, c)| c)
    }

    /// Signed distance to the union of all primitives.
    pub fn sdf(&self, p: &Vec3) -> f64 {
        self.objects
            .iter()
            .map(|o| o.shape.sdf(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Nearest in-bounds hit along a ray: `(range, normal, class)`.
    pub fn trace(&self, o: &Vec3, d: &Vec3) -> Option<(f64, Vec3, usize)> {
        let bounds = self.bounds();
        let tol = 1e-9 * bounds.extent().max();
        let mut best: Option<(f64, Vec3, usize)> = None;
        for obj in &self.objects {
            if let Some((t, n)) = obj.shape.intersect(o, d) {
                if best.is_none_or(|b| t < b.0) && bounds.contains(&(o + d * t), tol) {
                    best = Some((t, n, obj.class));
                }
            }
        }
        best
    }

    /// Five objects on a floor: two spheres, two yawed boxes.
    pub fn five_objects() -> Self {
        let floor_z = -0.6;
        let obj = |name: &str, class, shape| SynthObject {
            name: name.into(),
            class,
            shape,
        };
        SynthSceneSpec {
            bounds_min: [-1.6; 3],
            bounds_max: [1.6; 3],
            objects: vec![
                obj(
                    "floor",
                    0,
                    Shape::Plane {
                        normal: [0.0, 0.0, 1.0],
                        offset: floor_z,
                    },
                ),
                obj(
                    "ball",
                    1,
                    Shape::Sphere {
                        center: [-0.6, -0.5, floor_z + 0.45],
                        radius: 0.45,
                    },
                ),
                obj(
                    "crate",
                    2,
                    Shape::Box {
                        center: [0.6, -0.5, floor_z + 0.3],
                        half_extents: [0.3, 0.3, 0.3],
                        yaw_deg: 20.0,
                    },
                ),
                obj(
                    "globe",
                    3,
                    Shape::Sphere {
                        center: [0.55, 0.6, floor_z + 0.3],
                        radius: 0.3,
                    },
                ),
                obj(
                    "pillar",
                    4,
                    Shape::Box {
                        center: [-0.5, 0.6, floor_z + 0.5],
                        half_extents: [0.2, 0.25, 0.5],
                        yaw_deg: -15.0,
                    },
                ),
            ],
            class_names: ["floor", "ball", "crate", "globe", "pillar"].map(String::from).to_vec(),
            dim: 16,
            noise_sigma: 0.3,
            orbit: OrbitSpec {
                kind: OrbitKind::Spiral,
                views: 32,
                radius: 3.4,
                target: [0.0, 0.0, -0.3],
                elevation_min_deg: 20.0,
                elevation_max_deg: 65.0,
                turns: 2.0,
                fov_deg: 60.0,
                width: 160,
                height: 120,
            },
            level: 7,
            points_per_class: 2000,
            crops: None,
        }
    }

    /// A single sphere seen from all around.
    pub fn sphere(radius: f64, views: usize, level: u32) -> Self {
        let half = 1.6 * radius;
        SynthSceneSpec {
            bounds_min: [-half; 3],
            bounds_max: [half; 3],
            objects: vec![SynthObject {
                name: "sphere".into(),
                class: 0,
                shape: Shape::Sphere {
                    center: [0.0; 3],
                    radius,
                },
            }],
            class_names: vec!["sphere".into()],
            dim: 2,
            noise_sigma: 0.0,
            orbit: OrbitSpec {
                kind: OrbitKind::Fibonacci,
                views,
                radius: 3.0 * radius,
                target: [0.0; 3],
                elevation_min_deg: -75.0,
                elevation_max_deg: 75.0,
                turns: 1.0,
                fov_deg: 50.0,
                width: 128,
                height: 128,
            },
            level,
            points_per_class: 0,
            crops: None,
        }
    }
}

/// Orthonormal prototypes (classes first, background last) from
/// Gram-Schmidt on seeded Gaussian vectors.
pub fn prototypes(count: usize, dim: usize, seed: u64) -> Result<Vec<Vec<f32>>> {
    if count > dim {
        return Err(Error::domain(format!(
            "cannot fit {count} orthonormal vectors in {dim} dimensions"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= d * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Ok(basis
        .into_iter()
        .map(|v| v.into_iter().map(|x| x as f32).collect())
        .collect())
}

/// Derives an independent stream seed for a sub-task.
fn stream_seed(seed: u64, stream: u64, index: u64) -> u64 {
    seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

fn noisy(proto: &[f32], noise: &Normal<f64>, rng: &mut ChaCha8Rng) -> Vec<f32> {
    proto.iter().map(|p| (*p as f64 + noise.sample(rng)) as f32).collect()
}

/// Generates a complete scene. Deterministic in `seed`.
pub fn synth_scene(spec: &SynthSceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let bounds = spec.bounds();
    let cameras = spec.orbit.cameras()?;
    let protos = prototypes(spec.class_count() + 1, spec.dim, stream_seed(seed, 1, 0))?;
    let background = &protos[spec.class_count()];
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::domain(e.to_string()))?;
    let views: Vec<SceneView> = cameras
        .into_par_iter()
        .enumerate()
        .map(|(i, camera)| {
            let (w, h) = (camera.width, camera.height);
            let mut depth = ImagePlane::new(w, h, 1);
            let mut normal = ImagePlane::new(w, h, 3);
            let mut labels = ImagePlane::new(w, h, 1);
            let mut feature = ImagePlane::new(w, h, spec.dim);
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 2, i as u64));
            for v in 0..h {
                for u in 0..w {
                    let (o, d) = camera.pixel_ray(u, v);
                    let class = match spec.trace(&o, &d) {
                        Some((t, n, c)) => {
                            depth.set(u, v, &[t as f32]);
                            normal.set(u, v, &[n.x as f32, n.y as f32, n.z as f32]);
                            labels.set(u, v, &[c as f32]);
                            Some(c)
                        }
                        None => None,
                    };
                    let proto = class.map_or(background, |c| &protos[c]);
                    feature.set(u, v, &noisy(proto, &noise, &mut rng));
                }
            }
            let crops = spec.crops.map(|cs| {
                let mut crng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 3, i as u64));
                crop_features(&feature, &labels, &protos, background, cs, &noise, &mut crng)
            });
            SceneView {
                name: format!("view_{i:03}"),
                camera,
                depth,
                feature: Some(feature),
                crops,
                normal: Some(normal),
                labels: Some(labels),
            }
        })
        .collect();

    let gt_points = sample_points(spec, &bounds, seed);
    let classes = spec
        .class_names
        .iter()
        .zip(&protos)
        .map(|(n, p)| QueryEmbedding::new(n.clone(), p.clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Scene {
        bounds,
        views,
        classes,
        gt_points: (spec.points_per_class > 0).then_some(gt_points),
        gt_spec: Some(spec.clone()),
    })
}

/// Crops laid out every `stride` pixels (plus a final crop flush with the
/// far edge) with independently drawn noise.
fn crop_features(
    full: &ImagePlane,
    labels: &ImagePlane,
    protos: &[Vec<f32>],
    background: &[f32],
    cs: CropSpec,
    noise: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) -> Vec<CropFeature> {
    let starts = |n: usize| -> Vec<usize> {
        let size = cs.size.min(n);
        let mut v: Vec<usize> = (0..=n - size).step_by(cs.stride.max(1)).collect();
        if v.last() != Some(&(n - size)) {
            v.push(n - size);
        }
        v
    };
    let (sw, sh) = (cs.size.min(full.width), cs.size.min(full.height));
    let mut crops = Vec::new();
    for &y0 in &starts(full.height) {
        for &x0 in &starts(full.width) {
            let feature = ImagePlane::from_fn(sw, sh, full.channels, |x, y| {
                let proto = labels
                    .scalar(x0 + x, y0 + y)
                    .map_or(background, |c| &protos[c as usize]);
                Some(noisy(proto, noise, rng))
            });
            crops.push(CropFeature {
                anchor: (x0, y0),
                feature,
            });
        }
    }
    crops
}

/// Surface points per class, excluding points inside or touching other
/// primitives.
fn sample_points(spec: &SynthSceneSpec, bounds: &Aabb, seed: u64) -> LabeledPoints {
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for class in 0..spec.class_count() {
        let members: Vec<&SynthObject> = spec.objects.iter().filter(|o| o.class == class).collect();
        if members.is_empty() {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 4, class as u64));
        let mut got = 0;
        let mut attempts = 0usize;
        while got < spec.points_per_class && attempts < 1000 * spec.points_per_class.max(1) {
            attempts += 1;
            let obj = members[rng.random_range(0..members.len())];
            let Some(p) = obj.shape.sample_surface(&mut rng, bounds) else {
                continue;
            };
            if !bounds.contains(&p, 0.0) {
                continue;
            }
            let clear = spec
                .objects
                .iter()
                .filter(|o| !std::ptr::eq(*o, obj))
                .all(|o| o.shape.sdf(&p) > 1e-6);
            if clear {
                points.push(p);
                labels.push(class);
                got += 1;
            }
        }
    }
    LabeledPoints { points, labels }
}
