//! Open-vocabulary retrieval over a fused grid.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::grid::{sh, SparseVoxelGrid, VoxelKey};
use crate::image::ImagePlane;
use crate::render::{render_scalar, RenderConfig, RenderIndex};

#[derive(Debug, Clone, PartialEq)]
pub struct QueryEmbedding {
    pub label: String,
    pub vector: Vec<f32>,
}

impl QueryEmbedding {
    pub fn new(label: impl Into<String>, vector: Vec<f32>) -> Result<Self> {
        let label = label.into();
        let norm = vector.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::DegenerateFeature(format!("query '{label}' has norm {norm}")));
        }
        Ok(QueryEmbedding { label, vector })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    let n = (aa * bb).sqrt();
    if n > 0.0 {
        (ab / n).clamp(-1.0, 1.0)
    } else {
        0.0
    }
}

/// Per-voxel scores, aligned with the grid's iteration order. Unfused
/// voxels carry `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub label: String,
    pub keys: Vec<VoxelKey>,
    pub raw: Vec<Option<f64>>,
    pub normalized: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mask3d {
    pub threshold: f64,
    pub keys: Vec<VoxelKey>,
    /// Voxel centers of the selected voxels.
    pub points: Vec<Vec3>,
}

/// Cosine relevance of every fused voxel, min-max normalized over the
/// fused voxels (a constant score maps to 0.5).
pub fn relevance(grid: &SparseVoxelGrid, q: &QueryEmbedding) -> Result<QueryResult> {
    if q.dim() != grid.feature_dim() {
        return Err(Error::DimensionMismatch(format!(
            "query '{}' has dimension {}, grid features have {}",
            q.label,
            q.dim(),
            grid.feature_dim()
        )));
    }
    let records: Vec<_> = grid.iter().collect();
    let raw: Vec<Option<f64>> = records
        .par_iter()
        .map(|(_, r)| r.is_fused().then(|| cosine(&r.feature, &q.vector)))
        .collect();
    let (lo, hi) = raw
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(*v), hi.max(*v))
        });
    if lo > hi {
        return Err(Error::EmptyDomain("grid has no fused voxel".into()));
    }
    let normalized = raw
        .iter()
        .map(|r| r.map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 }))
        .collect();
    Ok(QueryResult {
        label: q.label.clone(),
        keys: records.iter().map(|(k, _)| **k).collect(),
        raw,
        normalized,
    })
}

/// Fused voxels whose normalized score reaches `threshold`.
pub fn mask3d(grid: &SparseVoxelGrid, result: &QueryResult, threshold: f64) -> Mask3d {
    let keys: Vec<VoxelKey> = result
        .keys
        .iter()
        .zip(&result.normalized)
        .filter(|(_, s)| matches!(s, Some(s) if *s >= threshold))
        .map(|(k, _)| *k)
        .collect();
    Mask3d {
        threshold,
        points: keys.iter().map(|k| grid.voxel_center(k)).collect(),
        keys,
    }
}

/// Alpha-composites the normalized scores into a single-channel image.
pub fn render_relevance(
    grid: &SparseVoxelGrid,
    result: &QueryResult,
    camera: &Camera,
    cfg: &RenderConfig,
) -> Result<ImagePlane> {
    if result.keys.len() != grid.len() || result.keys.iter().zip(grid.keys()).any(|(a, b)| a != b) {
        return Err(Error::DimensionMismatch("query result does not match the grid".into()));
    }
    render_scalar(&RenderIndex::new(grid), &result.normalized, camera, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointLabels {
    /// Per point, one probability per class.
    pub probabilities: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Uniform spatial hash over points for exact k-nearest-neighbour queries.
pub struct SpatialHash<'p> {
    points: &'p [Vec3],
    cell: f64,
    cells: HashMap<[i64; 3], Vec<u32>>,
    lo: [i64; 3],
    hi: [i64; 3],
}

impl<'p> SpatialHash<'p> {
    pub fn new(points: &'p [Vec3], cell: f64) -> Self {
        let mut cells: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for (i, p) in points.iter().enumerate() {
            let c = Self::cell_of(p, cell);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
            cells.entry(c).or_default().push(i as u32);
        }
        SpatialHash {
            points,
            cell,
            cells,
            lo,
            hi,
        }
    }

    fn cell_of(p: &Vec3, cell: f64) -> [i64; 3] {
        [
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        ]
    }

    /// The `k` nearest points as `(squared distance, index)`, ascending,
    /// ties broken by index.
    pub fn knn(&self, q: &Vec3, k: usize) -> Vec<(f64, usize)> {
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        if self.points.is_empty() || k == 0 {
            return best;
        }
        let c = Self::cell_of(q, self.cell);
        // rings beyond this cannot contain points
        let max_ring = (0..3)
            .map(|a| (c[a] - self.lo[a]).abs().max((self.hi[a] - c[a]).abs()))
            .max()
            .unwrap_or(0);
        let insert = |best: &mut Vec<(f64, usize)>, cand: (f64, usize)| {
            let pos = best.partition_point(|b| b.0 < cand.0 || (b.0 == cand.0 && b.1 < cand.1));
            if pos < k {
                best.insert(pos, cand);
                best.truncate(k);
            }
        };
        for r in 0..=max_ring {
            let span = |a: usize| (-r).max(self.lo[a] - c[a])..=r.min(self.hi[a] - c[a]);
            for dz in span(2) {
                for dy in span(1) {
                    for dx in span(0) {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        let key = [c[0] + dx, c[1] + dy, c[2] + dz];
                        if let Some(ids) = self.cells.get(&key) {
                            for &i in ids {
                                let d2 = (self.points[i as usize] - q).norm_squared();
                                insert(&mut best, (d2, i as usize));
                            }
                        }
                    }
                }
            }
            // everything within r cells of q has been searched
            let covered = r as f64 * self.cell;
            if best.len() == k && best[k - 1].0 <= covered * covered {
                break;
            }
        }
        best
    }
}

/// Class probabilities of points from their `k` nearest fused voxels.
///
/// Each candidate voxel votes with the softmax of its cosine logits
/// against the class embeddings, weighted by `exp(-d^2 / 2)`.
pub fn transfer_pointcloud(
    grid: &SparseVoxelGrid,
    points: &[Vec3],
    classes: &[QueryEmbedding],
    k: usize,
) -> Result<PointLabels> {
    if k < 1 {
        return Err(Error::domain("K must be at least 1"));
    }
    if classes.is_empty() {
        return Err(Error::domain("no class embeddings"));
    }
    for c in classes {
        if c.dim() != grid.feature_dim() {
            return Err(Error::DimensionMismatch(format!(
                "class '{}' has dimension {}, grid features have {}",
                c.label,
                c.dim(),
                grid.feature_dim()
            )));
        }
    }
    let fused: Vec<(VoxelKey, &[f32])> = grid
        .iter()
        .filter(|(_, r)| r.is_fused())
        .map(|(k, r)| (*k, r.feature.as_slice()))
        .collect();
    if fused.is_empty() {
        return Err(Error::EmptyDomain("grid has no fused voxel".into()));
    }
    let centers: Vec<Vec3> = fused.iter().map(|(k, _)| grid.voxel_center(k)).collect();
    let probs: Vec<Vec<f64>> = fused
        .par_iter()
        .map(|(_, f)| softmax(&classes.iter().map(|c| cosine(f, &c.vector)).collect::<Vec<_>>()))
        .collect();
    let edge = grid.finest_voxel_size().expect("grid is non-empty");
    let hash = SpatialHash::new(&centers, 2.0 * edge);
    let probabilities: Vec<Vec<f64>> = points
        .par_iter()
        .map(|p| {
            let mut score = vec![0.0; classes.len()];
            let mut wsum = 0.0;
            for (d2, i) in hash.knn(p, k) {
                let w = (-0.5 * d2).exp();
                wsum += w;
                for (s, pr) in score.iter_mut().zip(&probs[i]) {
                    *s += w * pr;
                }
            }
            score.into_iter().map(|s| s / wsum).collect()
        })
        .collect();
    let labels = probabilities.iter().map(|p| argmax(p)).collect();
    Ok(PointLabels { probabilities, labels })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryMetrics {
    pub iou: f64,
    pub acc25_hit: bool,
    /// Fraction of the ground truth that was retrieved.
    pub recall: f64,
    pub loc_hit: Option<bool>,
}

/// IoU and recall of two masks over the same universe.
pub fn metrics(pred: &[bool], gt: &[bool]) -> Result<QueryMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::DimensionMismatch(format!(
            "mask universes differ: {} vs {} elements",
            pred.len(),
            gt.len()
        )));
    }
    let inter = pred.iter().zip(gt).filter(|(p, g)| **p && **g).count();
    let union = pred.iter().zip(gt).filter(|(p, g)| **p || **g).count();
    let gt_count = gt.iter().filter(|g| **g).count();
    let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    Ok(QueryMetrics {
        iou,
        acc25_hit: iou >= 0.25,
        recall: if gt_count == 0 {
            1.0
        } else {
            inter as f64 / gt_count as f64
        },
        loc_hit: None,
    })
}

/// Whether the maximum of a relevance map (first in row-major order on
/// ties) falls inside the ground-truth region.
pub fn localization_hit(map: &ImagePlane, region: &[bool]) -> Result<bool> {
    if region.len() != map.len() {
        return Err(Error::DimensionMismatch("region and map sizes differ".into()));
    }
    let mut best: Option<(f32, usize)> = None;
    for (i, (v, ok)) in map.values.iter().step_by(map.channels).zip(&map.valid).enumerate() {
        if *ok && best.is_none_or(|(b, _)| *v > b) {
            best = Some((*v, i));
        }
    }
    Ok(best.is_some_and(|(_, i)| region[i]))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub miou: f64,
    pub acc25: f64,
    /// Mean per-class recall.
    pub macc: f64,
    /// `None` when no query carried a localization result.
    pub loc_acc: Option<f64>,
}

pub fn aggregate(list: &[QueryMetrics]) -> Result<Summary> {
    if list.is_empty() {
        return Err(Error::EmptyDomain("no query metrics to aggregate".into()));
    }
    let n = list.len() as f64;
    let locs: Vec<bool> = list.iter().filter_map(|m| m.loc_hit).collect();
    Ok(Summary {
        miou: list.iter().map(|m| m.iou).sum::<f64>() / n,
        acc25: list.iter().filter(|m| m.acc25_hit).count() as f64 / n,
        macc: list.iter().map(|m| m.recall).sum::<f64>() / n,
        loc_acc: (!locs.is_empty()).then(|| locs.iter().filter(|h| **h).count() as f64 / locs.len() as f64),
    })
}

/// Mean over ground-truth classes of the fraction of their points labeled
/// correctly.
pub fn mean_class_accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::DimensionMismatch("label lists differ in length".into()));
    }
    let mut per: std::collections::BTreeMap<usize, (usize, usize)> = Default::default();
    for (p, g) in pred.iter().zip(gt) {
        let e = per.entry(*g).or_default();
        e.1 += 1;
        if p == g {
            e.0 += 1;
        }
    }
    if per.is_empty() {
        return Err(Error::EmptyDomain("no labeled points".into()));
    }
    Ok(per.values().map(|(c, n)| *c as f64 / *n as f64).sum::<f64>() / per.len() as f64)
}

/// Replaces the colour coefficients of the masked voxels.
pub fn edit_voxels(grid: &mut SparseVoxelGrid, mask: &[VoxelKey], new_color: &[[f32; 3]]) -> Result<()> {
    let expected = sh::coefficient_count(grid.sh_degree());
    if new_color.len() != expected {
        return Err(Error::DimensionMismatch(format!(
            "{} colour coefficients for SH degree {} (expected {expected})",
            new_color.len(),
            grid.sh_degree()
        )));
    }
    if let Some(k) = mask.iter().find(|k| !grid.contains(k)) {
        return Err(Error::UnknownVoxel(k.to_string()));
    }
    for k in mask {
        grid.record_mut(k).expect("checked").sh = new_color.to_vec();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Aabb;
    use crate::grid::morton_encode;

    /// Grid with one level-3 voxel per feature, along the x axis.
    fn grid_with(features: &[Option<Vec<f32>>]) -> SparseVoxelGrid {
        let mut g = SparseVoxelGrid::new(Aabb::cube(Vec3::zeros(), 1.0), 0).unwrap();
        let dim = features.iter().flatten().next().map(|f| f.len()).unwrap_or(2);
        for i in 0..features.len() {
            g.insert(morton_encode(i as u32, 0, 0, 3).unwrap(), [1.0; 8], [0.5; 3])
                .unwrap();
        }
        g.reset_features(dim);
        let keys: Vec<_> = g.keys().copied().collect();
        for (k, f) in keys.iter().zip(features) {
            if let Some(f) = f {
                let r = g.record_mut(k).unwrap();
                r.feature = f.clone();
                r.weight_sum = 1.0;
            }
        }
        g
    }

    fn q(v: &[f32]) -> QueryEmbedding {
        QueryEmbedding::new("q", v.to_vec()).unwrap()
    }

    #[test]
    fn constant_scores_normalize_to_half() {
        let g = grid_with(&[Some(vec![1.0, 0.0]), Some(vec![2.0, 0.0])]);
        let r = relevance(&g, &q(&[3.0, 0.0])).unwrap();
        assert_eq!(r.raw, vec![Some(1.0), Some(1.0)]);
        assert_eq!(r.normalized, vec![Some(0.5), Some(0.5)]);
    }

    #[test]
    fn min_max_normalization() {
        let g = grid_with(&[Some(vec![1.0, 0.0]), Some(vec![0.0, 1.0])]);
        let r = relevance(&g, &q(&[1.0, 0.0])).unwrap();
        assert_eq!(r.normalized, vec![Some(1.0), Some(0.0)]);

        let ang = |c: f64| Some(vec![c as f32, (1.0 - c * c).sqrt() as f32]);
        let g = grid_with(&[ang(0.2), ang(0.5), ang(0.8), None]);
        let r = relevance(&g, &q(&[1.0, 0.0])).unwrap();
        let n: Vec<f64> = r.normalized.iter().flatten().copied().collect();
        for (a, b) in n.iter().zip([0.0, 0.5, 1.0]) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(r.normalized[3], None);
        // only fused voxels enter the mask, and thresholds nest
        assert_eq!(mask3d(&g, &r, 0.0).keys.len(), 3);
        assert_eq!(mask3d(&g, &r, 0.7).keys, vec![r.keys[2]]);
        assert_eq!(mask3d(&g, &r, 0.3).keys, vec![r.keys[1], r.keys[2]]);
        assert!(mask3d(&g, &r, 1.1).keys.is_empty());
    }

    #[test]
    fn relevance_errors() {
        let g = grid_with(&[None]);
        assert!(matches!(relevance(&g, &q(&[1.0, 0.0])), Err(Error::EmptyDomain(_))));
        assert!(matches!(relevance(&g, &q(&[1.0])), Err(Error::DimensionMismatch(_))));
        assert!(QueryEmbedding::new("zero", vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn knn_matches_brute_force_with_ties() {
        let pts: Vec<Vec3> = (0..27)
            .map(|i| Vec3::new((i % 3) as f64, (i / 3 % 3) as f64, (i / 9) as f64) * 0.5)
            .collect();
        let hash = SpatialHash::new(&pts, 0.3);
        let q = Vec3::new(0.5, 0.5, 0.5);
        let got = hash.knn(&q, 7);
        let mut brute: Vec<(f64, usize)> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| ((p - q).norm_squared(), i))
            .collect();
        brute.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        assert_eq!(got, brute[..7].to_vec());
        assert_eq!(hash.knn(&Vec3::new(40.0, 0.0, 0.0), 30).len(), 27);
    }

    #[test]
    fn point_at_voxel_center_takes_its_class() {
        let g = grid_with(&[Some(vec![1.0, 0.0]), Some(vec![0.0, 1.0])]);
        let classes = [q(&[1.0, 0.0]), q(&[0.0, 1.0])];
        let keys: Vec<_> = g.keys().copied().collect();
        let pts = [g.voxel_center(&keys[0]), g.voxel_center(&keys[1])];
        let out = transfer_pointcloud(&g, &pts, &classes, 1).unwrap();
        assert_eq!(out.labels, vec![0, 1]);
        // equidistant point, K = 2: plain average of the two softmaxes
        let mid = (pts[0] + pts[1]) / 2.0;
        let out = transfer_pointcloud(&g, &[mid], &classes, 2).unwrap();
        let p = softmax(&[1.0, 0.0]);
        assert!((out.probabilities[0][0] - (p[0] + p[1]) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn metric_arithmetic() {
        let m = metrics(&[true, true, false, false], &[true, false, true, false]).unwrap();
        assert!((m.iou - 1.0 / 3.0).abs() < 1e-15);
        assert!(m.acc25_hit);
        assert_eq!(m.recall, 0.5);
        assert_eq!(metrics(&[true, false], &[false, true]).unwrap().iou, 0.0);
        assert_eq!(metrics(&[false], &[false]).unwrap().iou, 1.0);
        assert_eq!(metrics(&[true, false], &[true, false]).unwrap().iou, 1.0);
        assert!(metrics(&[true], &[true, false]).is_err());
        let s = aggregate(&[
            QueryMetrics {
                iou: 1.0,
                acc25_hit: true,
                recall: 1.0,
                loc_hit: Some(true),
            },
            QueryMetrics {
                iou: 0.2,
                acc25_hit: false,
                recall: 0.5,
                loc_hit: Some(false),
            },
        ])
        .unwrap();
        assert!((s.miou - 0.6).abs() < 1e-15);
        assert_eq!((s.acc25, s.macc, s.loc_acc), (0.5, 0.75, Some(0.5)));
        assert_eq!(
            mean_class_accuracy(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap(),
            (1.0 + 2.0 / 3.0) / 2.0
        );
    }

    #[test]
    fn localization_uses_argmax_pixel() {
        let map = ImagePlane::from_fn(3, 1, 1, |x, _| Some(vec![[0.1, 0.9, 0.3][x]]));
        assert!(localization_hit(&map, &[false, true, false]).unwrap());
        assert!(!localization_hit(&map, &[true, false, true]).unwrap());
    }

    #[test]
    fn editing() {
        let mut g = grid_with(&[Some(vec![1.0, 0.0]), Some(vec![0.0, 1.0])]);
        let before = g.clone();
        edit_voxels(&mut g, &[], &[[0.0; 3]]).unwrap();
        assert_eq!(g, before);
        let keys: Vec<_> = g.keys().copied().collect();
        edit_voxels(&mut g, &keys[..1], &[[0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(g.record(&keys[0]).unwrap().sh, vec![[0.0; 3]]);
        assert_eq!(g.record(&keys[1]), before.record(&keys[1]));
        let missing = morton_encode(7, 7, 7, 3).unwrap();
        assert!(matches!(
            edit_voxels(&mut g, &[missing], &[[0.0; 3]]),
            Err(Error::UnknownVoxel(_))
        ));
        assert!(edit_voxels(&mut g, &keys, &[[0.0; 3]; 4]).is_err());
    }
}
