//! End-to-end stages: TSDF build and voxelization, view preparation,
//! fusion, and evaluation against ground truth.

use log::{info, warn};
use rayon::prelude::*;

use crate::camera::Camera;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::feat2d::{gaussian_window_blend, scga, scra, CropFeature};
use crate::fuse3d::{fuse, FusionStats, ViewBundle};
use crate::geomreg::{normal_loss, patch_depth_loss};
use crate::grid::{morton_encode, SparseVoxelGrid, CORNER_OFFSETS};
use crate::image::{DepthMap, FeatureMap};
use crate::io::scene::Scene;
use crate::mesh::TriangleMesh;
use crate::query::{
    aggregate, localization_hit, mask3d, mean_class_accuracy, metrics, relevance, transfer_pointcloud, QueryMetrics,
    Summary,
};
use crate::render::{raycast_with_bvh, render_scalar, render_with_index, MeshBvh, RenderIndex, RenderOutput};
use crate::tsdf::{blend_multilevel, extract_mesh, TsdfField};

pub const DEFAULT_LEVEL: u32 = 7;

/// Fine level for a scene: the config override, else the level recorded
/// with the scene, else the default.
pub fn scene_level(scene: &Scene, cfg: &Config) -> u32 {
    cfg.level
        .or(scene.gt_spec.as_ref().map(|s| s.level))
        .unwrap_or(DEFAULT_LEVEL)
}

/// Integrates every view into a field at `level`.
pub fn integrate_level(scene: &Scene, level: u32, trunc_voxels: f64) -> Result<TsdfField> {
    let edge = scene.bounds.extent().x / (1u64 << level) as f64;
    let mut field = TsdfField::new(scene.bounds, level, trunc_voxels * edge)?;
    field.allocate_from_views(scene.views.iter().map(|v| (&v.camera, &v.depth)));
    for v in &scene.views {
        field.integrate_depth(&v.camera, &v.depth)?;
    }
    Ok(field)
}

/// Fine field and its coarser companions, before blending.
pub fn integrate_levels(scene: &Scene, cfg: &Config) -> Result<(TsdfField, Vec<TsdfField>)> {
    let level = scene_level(scene, cfg);
    if cfg.coarse_levels > level {
        return Err(Error::Config(format!(
            "{} coarse levels requested below level {level}",
            cfg.coarse_levels
        )));
    }
    let fine = integrate_level(scene, level, cfg.trunc_voxels)?;
    let coarse = (1..=cfg.coarse_levels)
        .map(|k| integrate_level(scene, level - k, cfg.trunc_voxels))
        .collect::<Result<Vec<_>>>()?;
    Ok((fine, coarse))
}

/// Sparse grid over the cells of `field` that touch the truncation band.
///
/// A cell becomes a voxel when any of its observed corners has
/// `|phi| < trunc`. Corner densities follow a sigmoid of the signed
/// distance; unobserved corners are empty space.
pub fn voxelize(field: &TsdfField, cfg: &Config) -> Result<SparseVoxelGrid> {
    let mut grid = SparseVoxelGrid::new(*field.bounds(), 0)?;
    let edge = field.edge();
    let scale = cfg.density_scale / edge;
    let width = cfg.density_sharpness * edge;
    if !(scale > 0.0 && width > 0.0) {
        return Err(Error::domain("density scale and sharpness must be positive"));
    }
    let m = field.max_coord();
    let samples = field.samples();
    let cells: Vec<Option<([u32; 3], [f32; 8])>> = field
        .coords()
        .par_iter()
        .map(|c| {
            if c.iter().any(|v| *v >= m) {
                return None;
            }
            let mut dens = [0f32; 8];
            let mut in_band = false;
            for (j, o) in CORNER_OFFSETS.iter().enumerate() {
                let s = &samples[field.index_of(&[c[0] + o[0], c[1] + o[1], c[2] + o[2]])?];
                if s.is_observed() {
                    in_band |= s.phi.abs() < field.trunc();
                    dens[j] = (scale / (1.0 + (s.phi / width).exp())) as f32;
                }
            }
            in_band.then_some((*c, dens))
        })
        .collect();
    for (c, dens) in cells.into_iter().flatten() {
        grid.insert(morton_encode(c[0], c[1], c[2], field.level())?, dens, [0.5; 3])?;
    }
    Ok(grid)
}

#[derive(Debug, Clone)]
pub struct BuildOutput {
    pub grid: SparseVoxelGrid,
    /// Blended fine field.
    pub tsdf: TsdfField,
    pub mesh: TriangleMesh,
}

/// Multi-level integration, blending, voxelization and mesh extraction.
pub fn build(scene: &Scene, cfg: &Config) -> Result<BuildOutput> {
    if scene.views.is_empty() {
        return Err(Error::domain("scene has no views"));
    }
    let (fine, coarse) = integrate_levels(scene, cfg)?;
    info!(
        "integrated level {}: {} corners, {} observed",
        fine.level(),
        fine.len(),
        fine.observed_count()
    );
    if fine.is_empty() {
        return Err(Error::EmptyDomain(
            "no depth observation falls inside the scene bounds".into(),
        ));
    }
    let tsdf = blend_multilevel(&fine, &coarse, &cfg.blend)?;
    let grid = voxelize(&tsdf, cfg)?;
    let mesh = extract_mesh(&tsdf);
    info!("{} voxels, {} mesh triangles", grid.len(), mesh.triangles.len());
    Ok(BuildOutput { grid, tsdf, mesh })
}

/// Feature map from crops: Gaussian-window stitching followed by the
/// recursive and global attention passes.
pub fn stitch(crops: &[CropFeature], width: usize, height: usize, cfg: &Config) -> Result<FeatureMap> {
    let blended = gaussian_window_blend(crops, width, height, cfg.stitch_sigma_g, cfg.stitch_eps)?;
    let refined = scra(&blended, &cfg.attention)?;
    scga(&refined, &cfg.attention)
}

/// Per-view feature maps: the full map when present, else stitched crops.
pub fn view_features(scene: &Scene, cfg: &Config) -> Result<Vec<FeatureMap>> {
    scene
        .views
        .iter()
        .map(|v| match (&v.feature, &v.crops) {
            (Some(f), _) => Ok(f.clone()),
            (None, Some(c)) => stitch(c, v.camera.width, v.camera.height, cfg),
            (None, None) => Err(Error::DimensionMismatch(format!("view '{}' has no features", v.name))),
        })
        .collect()
}

/// Renders and raycasts every camera.
pub fn render_views(
    grid: &SparseVoxelGrid,
    mesh: &TriangleMesh,
    cameras: &[&Camera],
    cfg: &Config,
) -> Result<Vec<(RenderOutput, DepthMap)>> {
    cfg.render.validate()?;
    let index = RenderIndex::new(grid);
    let bvh = MeshBvh::new(mesh);
    Ok(cameras
        .iter()
        .map(|c| (render_with_index(&index, c, &cfg.render), raycast_with_bvh(&bvh, c)))
        .collect())
}

/// Fuses the scene's features into `grid`, using `mesh` for occlusion and
/// confidence.
pub fn fuse_scene(grid: &mut SparseVoxelGrid, mesh: &TriangleMesh, scene: &Scene, cfg: &Config) -> Result<FusionStats> {
    let edge = grid
        .finest_voxel_size()
        .ok_or_else(|| Error::EmptyDomain("grid has no active voxels".into()))?;
    let features = view_features(scene, cfg)?;
    let cameras: Vec<&Camera> = scene.views.iter().map(|v| &v.camera).collect();
    let rendered = render_views(grid, mesh, &cameras, cfg)?;
    let bundles = scene
        .views
        .iter()
        .zip(features)
        .zip(rendered)
        .map(|((v, f), (r, dm))| ViewBundle::new(v.camera, f, r.depth, dm))
        .collect::<Result<Vec<_>>>()?;
    let stats = fuse(grid, &bundles, &cfg.fusion(edge))?;
    info!(
        "fused {} voxels, {:.1}% unfused",
        stats.fused,
        100.0 * stats.unfused_fraction()
    );
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRow {
    pub label: String,
    pub metrics: QueryMetrics,
    pub predicted: usize,
    pub ground_truth: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<QueryRow>,
    /// Over fused voxels (the voxels a query can select).
    pub summary: Summary,
    /// Mean IoU with every active voxel in the universe; unfused voxels
    /// count as unselected.
    pub miou_all_active: f64,
    pub transfer_macc: Option<f64>,
    pub patch_loss: Option<f64>,
    pub normal_loss: Option<f64>,
}

impl EvalReport {
    /// Tab-separated table: one row per query, then summary rows.
    pub fn to_table(&self) -> String {
        let mut s = String::from("label\tiou\tacc25\tloc_hit\tpredicted\tground_truth\n");
        for r in &self.rows {
            let loc = r.metrics.loc_hit.map_or("na".to_string(), |h| (h as u8).to_string());
            s.push_str(&format!(
                "{}\t{:.6}\t{}\t{loc}\t{}\t{}\n",
                r.label, r.metrics.iou, r.metrics.acc25_hit as u8, r.predicted, r.ground_truth
            ));
        }
        let opt = |v: Option<f64>| v.map_or("na".to_string(), |v| format!("{v:.6}"));
        s.push_str(&format!("#miou\t{:.6}\n", self.summary.miou));
        s.push_str(&format!("#acc25\t{:.6}\n", self.summary.acc25));
        s.push_str(&format!("#macc\t{:.6}\n", self.summary.macc));
        s.push_str(&format!("#loc_acc\t{}\n", opt(self.summary.loc_acc)));
        s.push_str(&format!("#miou_all_active\t{:.6}\n", self.miou_all_active));
        s.push_str(&format!("#transfer_macc\t{}\n", opt(self.transfer_macc)));
        s.push_str(&format!("#patch_depth_loss\t{}\n", opt(self.patch_loss)));
        s.push_str(&format!("#normal_loss\t{}\n", opt(self.normal_loss)));
        s
    }
}

/// Scores every class query against the scene's analytic labels.
///
/// Localization uses the first view whose label map contains the class;
/// geometric losses compare rendered maps with the scene's depth and
/// normal priors over all views.
pub fn evaluate(grid: &SparseVoxelGrid, scene: &Scene, cfg: &Config) -> Result<EvalReport> {
    let spec = scene
        .gt_spec
        .as_ref()
        .ok_or_else(|| Error::domain("scene carries no analytic ground truth"))?;
    if scene.classes.is_empty() {
        return Err(Error::domain("scene has no class embeddings"));
    }
    let gt_class: Vec<Option<usize>> = grid
        .keys()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|k| spec.label_at(&grid.voxel_center(k)))
        .collect();
    let fused: Vec<bool> = grid.iter().map(|(_, r)| r.is_fused()).collect();
    let index = RenderIndex::new(grid);
    let mut rows = Vec::new();
    let mut all_active_iou = 0.0;
    for (class, q) in scene.classes.iter().enumerate() {
        let res = relevance(grid, q)?;
        let mask = mask3d(grid, &res, cfg.query_threshold);
        let pred_all: Vec<bool> = res
            .normalized
            .iter()
            .map(|s| matches!(s, Some(s) if *s >= cfg.query_threshold))
            .collect();
        let gt_all: Vec<bool> = gt_class.iter().map(|c| *c == Some(class)).collect();
        let pick = |v: &[bool]| -> Vec<bool> { v.iter().zip(&fused).filter(|(_, f)| **f).map(|(x, _)| *x).collect() };
        let mut m = metrics(&pick(&pred_all), &pick(&gt_all))?;
        all_active_iou += metrics(&pred_all, &gt_all)?.iou;
        let view = scene.views.iter().find(|v| {
            v.labels
                .as_ref()
                .is_some_and(|l| l.valid.iter().zip(&l.values).any(|(ok, c)| *ok && *c as usize == class))
        });
        if let Some(v) = view {
            let labels = v.labels.as_ref().expect("checked");
            let region: Vec<bool> = (0..labels.len())
                .map(|i| labels.valid[i] && labels.values[i] as usize == class)
                .collect();
            let map = render_scalar(&index, &res.normalized, &v.camera, &cfg.render)?;
            m.loc_hit = Some(localization_hit(&map, &region)?);
        }
        rows.push(QueryRow {
            label: q.label.clone(),
            metrics: m,
            predicted: mask.keys.len(),
            ground_truth: pick(&gt_all).iter().filter(|g| **g).count(),
        });
    }
    let summary = aggregate(&rows.iter().map(|r| r.metrics).collect::<Vec<_>>())?;

    let transfer_macc = match &scene.gt_points {
        Some(gt) if !gt.points.is_empty() => {
            let out = transfer_pointcloud(grid, &gt.points, &scene.classes, cfg.transfer_k)?;
            Some(mean_class_accuracy(&out.labels, &gt.labels)?)
        }
        _ => None,
    };

    let mut patch = Vec::new();
    let mut normal = Vec::new();
    for v in &scene.views {
        let out = render_with_index(&index, &v.camera, &cfg.render);
        match patch_depth_loss(&out.depth, &v.depth, &cfg.patch) {
            Ok(l) => patch.push(l),
            Err(Error::EmptyDomain(_)) => {}
            Err(e) => return Err(e),
        }
        if let Some(n) = &v.normal {
            match normal_loss(&out.normal, n) {
                Ok(l) => normal.push(l),
                Err(Error::EmptyDomain(_)) => {}
                Err(e) => return Err(e),
            }
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    if patch.is_empty() {
        warn!("no fully valid depth patch in any view");
    }
    Ok(EvalReport {
        miou_all_active: all_active_iou / scene.classes.len() as f64,
        rows,
        summary,
        transfer_macc,
        patch_loss: mean(&patch),
        normal_loss: mean(&normal),
    })
}
