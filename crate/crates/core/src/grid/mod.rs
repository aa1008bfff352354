//! Hierarchical sparse voxel storage.
//!
//! Voxels live in a cubic world box and are addressed by [`VoxelKey`]. The
//! active set is kept as an antichain: no active voxel is an ancestor of
//! another, so active voxels never overlap in space.

mod morton;
mod order;
pub mod sh;

use std::collections::BTreeMap;

pub use morton::{morton_encode, VoxelKey, MAX_LEVEL};
pub use order::front_to_back_order;

use crate::error::{Error, Result};
use crate::geom::{Aabb, Vec3};

/// Corner `j` sits at local offset `(j & 1, (j >> 1) & 1, (j >> 2) & 1)`.
pub const CORNER_OFFSETS: [[u32; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [0, 1, 0],
    [1, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [0, 1, 1],
    [1, 1, 1],
];

/// Geometry and corner densities of one voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct Voxel {
    pub key: VoxelKey,
    pub center: Vec3,
    pub size: f64,
    pub densities: [f32; 8],
}

impl Voxel {
    pub fn aabb(&self) -> Aabb {
        Aabb::cube(self.center, 0.5 * self.size)
    }

    pub fn min_corner(&self) -> Vec3 {
        self.center - Vec3::repeat(0.5 * self.size)
    }

    /// Local unit coordinates of `p`; fails when `p` is outside the closed cube.
    pub fn local_coords(&self, p: &Vec3) -> Result<Vec3> {
        let u = (p - self.min_corner()) / self.size;
        let tol = 1e-9;
        if u.iter().any(|c| !(*c >= -tol && *c <= 1.0 + tol)) {
            return Err(Error::domain(format!(
                "point ({:.6}, {:.6}, {:.6}) lies outside voxel {}",
                p.x, p.y, p.z, self.key
            )));
        }
        Ok(u.map(|c| c.clamp(0.0, 1.0)))
    }

    pub fn trilinear_density(&self, p: &Vec3) -> Result<f64> {
        let u = self.local_coords(p)?;
        Ok(trilinear(&self.densities, &u))
    }

    /// Gradient of the trilinear density with respect to world position.
    pub fn density_gradient(&self, p: &Vec3) -> Result<Vec3> {
        let u = self.local_coords(p)?;
        Ok(trilinear_gradient(&self.densities, &u) / self.size)
    }
}

#[inline]
pub fn trilinear_basis(u: &Vec3) -> [f64; 8] {
    let mut w = [0.0; 8];
    for (j, off) in CORNER_OFFSETS.iter().enumerate() {
        let mut b = 1.0;
        for a in 0..3 {
            b *= if off[a] == 1 { u[a] } else { 1.0 - u[a] };
        }
        w[j] = b;
    }
    w
}

#[inline]
pub fn trilinear(values: &[f32; 8], u: &Vec3) -> f64 {
    trilinear_basis(u).iter().zip(values).map(|(b, v)| b * *v as f64).sum()
}

/// Gradient in local unit coordinates.
pub fn trilinear_gradient(values: &[f32; 8], u: &Vec3) -> Vec3 {
    let mut g = Vec3::zeros();
    for (j, off) in CORNER_OFFSETS.iter().enumerate() {
        let f = |a: usize| if off[a] == 1 { u[a] } else { 1.0 - u[a] };
        let s = |a: usize| if off[a] == 1 { 1.0 } else { -1.0 };
        let v = values[j] as f64;
        g.x += v * s(0) * f(1) * f(2);
        g.y += v * f(0) * s(1) * f(2);
        g.z += v * f(0) * f(1) * s(2);
    }
    g
}

/// Per-voxel payload.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelRecord {
    pub densities: [f32; 8],
    /// SH colour coefficients, `(degree + 1)^2` RGB triplets.
    pub sh: Vec<[f32; 3]>,
    /// Fused feature; empty until the grid carries a feature channel.
    pub feature: Vec<f32>,
    /// Accumulated fusion weight. Zero marks an unfused voxel.
    pub weight_sum: f32,
}

impl VoxelRecord {
    pub fn is_fused(&self) -> bool {
        self.weight_sum > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseVoxelGrid {
    bounds: Aabb,
    sh_degree: u32,
    feature_dim: usize,
    voxels: BTreeMap<VoxelKey, VoxelRecord>,
    level_counts: BTreeMap<u32, usize>,
}

impl SparseVoxelGrid {
    /// Empty grid over a cubic box.
    pub fn new(bounds: Aabb, sh_degree: u32) -> Result<Self> {
        let e = bounds.extent();
        if !(e.x > 0.0 && e.x.is_finite()) {
            return Err(Error::domain("grid bounds must have positive finite extent"));
        }
        if (e.x - e.y).abs() > 1e-9 * e.x || (e.x - e.z).abs() > 1e-9 * e.x {
            return Err(Error::domain(format!(
                "grid bounds must be a cube, got extent ({}, {}, {})",
                e.x, e.y, e.z
            )));
        }
        if sh_degree > sh::MAX_SH_DEGREE {
            return Err(Error::domain(format!(
                "SH degree {sh_degree} exceeds the supported maximum {}",
                sh::MAX_SH_DEGREE
            )));
        }
        Ok(SparseVoxelGrid {
            bounds,
            sh_degree,
            feature_dim: 0,
            voxels: BTreeMap::new(),
            level_counts: BTreeMap::new(),
        })
    }

    pub fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    pub fn extent(&self) -> f64 {
        self.bounds.extent().x
    }

    pub fn sh_degree(&self) -> u32 {
        self.sh_degree
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    /// Levels that hold at least one active voxel, coarsest first.
    pub fn levels(&self) -> impl Iterator<Item = u32> + '_ {
        self.level_counts.keys().copied()
    }

    pub fn voxel_size(&self, level: u32) -> f64 {
        self.extent() / (1u64 << level) as f64
    }

    pub fn voxel_center(&self, key: &VoxelKey) -> Vec3 {
        let size = self.voxel_size(key.level);
        let [x, y, z] = key.decode();
        self.bounds.min + Vec3::new(x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5) * size
    }

    pub fn node_aabb(&self, key: &VoxelKey) -> Aabb {
        Aabb::cube(self.voxel_center(key), 0.5 * self.voxel_size(key.level))
    }

    /// Key of the level-`level` cell containing `p`, if inside the bounds.
    pub fn key_at(&self, p: &Vec3, level: u32) -> Option<VoxelKey> {
        if !self.bounds.contains(p, 0.0) {
            return None;
        }
        let n = 1u64 << level;
        let size = self.voxel_size(level);
        let c = (p - self.bounds.min) / size;
        let idx = c.map(|v| (v.floor().max(0.0) as u64).min(n - 1) as u32);
        morton_encode(idx.x, idx.y, idx.z, level).ok()
    }

    pub fn record(&self, key: &VoxelKey) -> Option<&VoxelRecord> {
        self.voxels.get(key)
    }

    pub fn record_mut(&mut self, key: &VoxelKey) -> Option<&mut VoxelRecord> {
        self.voxels.get_mut(key)
    }

    pub fn contains(&self, key: &VoxelKey) -> bool {
        self.voxels.contains_key(key)
    }

    pub fn voxel(&self, key: &VoxelKey) -> Option<Voxel> {
        self.voxels.get(key).map(|r| self.make_voxel(key, r))
    }

    fn make_voxel(&self, key: &VoxelKey, record: &VoxelRecord) -> Voxel {
        Voxel {
            key: *key,
            center: self.voxel_center(key),
            size: self.voxel_size(key.level),
            densities: record.densities,
        }
    }

    /// Active voxels in (level, Morton code) order.
    pub fn iter(&self) -> impl Iterator<Item = (&VoxelKey, &VoxelRecord)> {
        self.voxels.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&VoxelKey, &mut VoxelRecord)> {
        self.voxels.iter_mut()
    }

    pub fn keys(&self) -> impl Iterator<Item = &VoxelKey> {
        self.voxels.keys()
    }

    pub fn voxels(&self) -> impl Iterator<Item = Voxel> + '_ {
        self.voxels.iter().map(|(k, r)| self.make_voxel(k, r))
    }

    /// Returns the active ancestor or descendant of `key` that would break
    /// the antichain, if any.
    pub fn conflict(&self, key: &VoxelKey) -> Option<VoxelKey> {
        let mut cur = key.parent();
        while let Some(k) = cur {
            if self.voxels.contains_key(&k) {
                return Some(k);
            }
            cur = k.parent();
        }
        for level in self.level_counts.range(key.level + 1..).map(|(l, _)| *l) {
            let (lo, hi) = key.descendant_range(level);
            let range = VoxelKey { level, code: lo }..VoxelKey { level, code: hi };
            if let Some((k, _)) = self.voxels.range(range).next() {
                return Some(*k);
            }
        }
        None
    }

    /// Activates a voxel with a constant colour, replacing an existing record
    /// under the same key.
    pub fn insert(&mut self, key: VoxelKey, densities: [f32; 8], color: [f32; 3]) -> Result<()> {
        let mut sh = vec![[0.0; 3]; sh::coefficient_count(self.sh_degree)];
        sh[0] = color;
        let record = VoxelRecord {
            densities,
            sh,
            feature: vec![0.0; self.feature_dim],
            weight_sum: 0.0,
        };
        self.insert_record(key, record)
    }

    pub fn insert_record(&mut self, key: VoxelKey, record: VoxelRecord) -> Result<()> {
        if key.level > MAX_LEVEL || key.code >= 1u64 << (3 * key.level) {
            return Err(Error::domain(format!("invalid voxel key {key}")));
        }
        if record.densities.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::domain(format!(
                "voxel {key} has a negative or non-finite corner density"
            )));
        }
        if record.sh.len() != sh::coefficient_count(self.sh_degree) {
            return Err(Error::DimensionMismatch(format!(
                "voxel {key} carries {} SH coefficients, grid expects {}",
                record.sh.len(),
                sh::coefficient_count(self.sh_degree)
            )));
        }
        if record.feature.len() != self.feature_dim {
            return Err(Error::DimensionMismatch(format!(
                "voxel {key} feature has dimension {}, grid expects {}",
                record.feature.len(),
                self.feature_dim
            )));
        }
        if let Some(other) = self.conflict(&key) {
            return Err(Error::domain(format!("voxel {key} overlaps active voxel {other}")));
        }
        if self.voxels.insert(key, record).is_none() {
            *self.level_counts.entry(key.level).or_default() += 1;
        }
        Ok(())
    }

    pub fn remove(&mut self, key: &VoxelKey) -> Option<VoxelRecord> {
        let removed = self.voxels.remove(key)?;
        if let Some(c) = self.level_counts.get_mut(&key.level) {
            *c -= 1;
            if *c == 0 {
                self.level_counts.remove(&key.level);
            }
        }
        Some(removed)
    }

    /// Resets every voxel's feature to a zero vector of dimension `dim`.
    pub fn reset_features(&mut self, dim: usize) {
        self.feature_dim = dim;
        for r in self.voxels.values_mut() {
            r.feature = vec![0.0; dim];
            r.weight_sum = 0.0;
        }
    }

    pub fn fused_count(&self) -> usize {
        self.voxels.values().filter(|r| r.is_fused()).count()
    }

    /// Edge length of the finest active level, if any.
    pub fn finest_voxel_size(&self) -> Option<f64> {
        self.level_counts.keys().next_back().map(|l| self.voxel_size(*l))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_grid() -> SparseVoxelGrid {
        SparseVoxelGrid::new(Aabb::new(Vec3::zeros(), Vec3::repeat(8.0)), 0).unwrap()
    }

    fn voxel_with(densities: [f32; 8]) -> Voxel {
        Voxel {
            key: morton_encode(0, 0, 0, 0).unwrap(),
            center: Vec3::repeat(0.5),
            size: 1.0,
            densities,
        }
    }

    #[test]
    fn center_matches_key() {
        let g = unit_grid();
        let k = morton_encode(1, 2, 3, 2).unwrap();
        assert_eq!(g.voxel_center(&k), Vec3::new(3.0, 5.0, 7.0));
        assert_eq!(g.key_at(&Vec3::new(3.9, 4.1, 6.0), 2), Some(k));
    }

    #[test]
    fn constant_field_is_constant() {
        let v = voxel_with([2.5; 8]);
        for p in [Vec3::new(0.1, 0.7, 0.3), Vec3::repeat(0.5), Vec3::new(1.0, 0.0, 1.0)] {
            assert!((v.trilinear_density(&p).unwrap() - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn vertices_reproduce_corner_values() {
        let d = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        let v = voxel_with(d);
        for (j, off) in CORNER_OFFSETS.iter().enumerate() {
            let p = Vec3::new(off[0] as f64, off[1] as f64, off[2] as f64);
            assert_eq!(v.trilinear_density(&p).unwrap(), d[j] as f64);
        }
        assert!((v.trilinear_density(&Vec3::repeat(0.5)).unwrap() - 3.5).abs() < 1e-12);
    }

    #[test]
    fn outside_point_is_domain_error() {
        let v = voxel_with([1.0; 8]);
        assert!(matches!(
            v.trilinear_density(&Vec3::new(1.1, 0.5, 0.5)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn antichain_rejects_ancestor_and_descendant() {
        let mut g = unit_grid();
        let fine = morton_encode(5, 3, 7, 3).unwrap();
        g.insert(fine, [1.0; 8], [0.5; 3]).unwrap();
        assert!(g.insert(fine.ancestor_at(1), [1.0; 8], [0.5; 3]).is_err());
        let child = VoxelKey {
            level: 4,
            code: fine.code << 3 | 5,
        };
        assert!(g.insert(child, [1.0; 8], [0.5; 3]).is_err());
        let sibling = morton_encode(4, 3, 7, 3).unwrap();
        g.insert(sibling, [1.0; 8], [0.5; 3]).unwrap();
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn negative_density_rejected() {
        let mut g = unit_grid();
        let k = morton_encode(0, 0, 0, 1).unwrap();
        assert!(g.insert(k, [-1.0, 0., 0., 0., 0., 0., 0., 0.], [0.0; 3]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let v = voxel_with([0.3, 1.2, 0.0, 2.0, 0.7, 0.1, 1.9, 0.4]);
        let p = Vec3::new(0.31, 0.62, 0.45);
        let g = v.density_gradient(&p).unwrap();
        let h = 1e-6;
        for a in 0..3 {
            let mut dp = Vec3::zeros();
            dp[a] = h;
            let fd = (v.trilinear_density(&(p + dp)).unwrap() - v.trilinear_density(&(p - dp)).unwrap()) / (2.0 * h);
            assert!((fd - g[a]).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn random_key_pairs_respect_antichain(
            a in (0u32..6, any::<u64>()), b in (0u32..6, any::<u64>())
        ) {
            let ka = VoxelKey { level: a.0, code: a.1 % (1u64 << (3 * a.0)) };
            let kb = VoxelKey { level: b.0, code: b.1 % (1u64 << (3 * b.0)) };
            let mut g = unit_grid();
            g.insert(ka, [0.0; 8], [0.0; 3]).unwrap();
            let related = ka.is_ancestor_of(&kb) || kb.is_ancestor_of(&ka);
            let res = g.insert(kb, [0.0; 8], [0.0; 3]);
            prop_assert_eq!(res.is_err(), related);
            let keys: Vec<_> = g.keys().copied().collect();
            for x in &keys {
                for y in &keys {
                    prop_assert!(!x.is_ancestor_of(y));
                }
            }
        }

        #[test]
        fn trilinear_is_affine_in_each_corner(
            base in prop::array::uniform8(0.0f32..5.0),
            j in 0usize..8,
            lambda in -2.0f64..2.0,
            u in prop::array::uniform3(0.0f64..=1.0),
        ) {
            let p = Vec3::new(u[0], u[1], u[2]);
            let v0 = voxel_with(base);
            let mut bumped = base;
            bumped[j] += lambda as f32;
            let actual_lambda = (bumped[j] - base[j]) as f64;
            let v1 = Voxel { densities: bumped, ..v0.clone() };
            let off = CORNER_OFFSETS[j];
            let mut basis = 1.0;
            for a in 0..3 {
                basis *= if off[a] == 1 { u[a] } else { 1.0 - u[a] };
            }
            let diff = v1.trilinear_density(&p).unwrap() - v0.trilinear_density(&p).unwrap();
            prop_assert!((diff - actual_lambda * basis).abs() < 1e-5);
        }
    }
}
