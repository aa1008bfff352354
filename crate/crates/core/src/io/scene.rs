//! Scene directories: a TOML manifest plus per-view binary maps, crop
//! manifests, class embeddings and optional ground truth.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ply::{read_ply, write_ply, PlyData, PlyFormat};
use super::{read_embedding, read_image, write_embedding, write_image};
use crate::camera::{Camera, Pose};
use crate::error::{Error, Result};
use crate::feat2d::CropFeature;
use crate::geom::{Aabb, Vec3};
use crate::image::{DepthMap, FeatureMap, ImagePlane, NormalMap};
use crate::query::QueryEmbedding;
use crate::synth::SynthSceneSpec;

pub const MANIFEST_NAME: &str = "scene.toml";

#[derive(Debug, Clone, PartialEq)]
pub struct SceneView {
    pub name: String,
    pub camera: Camera,
    pub depth: DepthMap,
    pub feature: Option<FeatureMap>,
    pub crops: Option<Vec<CropFeature>>,
    /// Prior normals, used by the normal-consistency metric.
    pub normal: Option<NormalMap>,
    /// Per-pixel class ids (single channel); invalid where nothing was hit.
    pub labels: Option<ImagePlane>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPoints {
    pub points: Vec<Vec3>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub bounds: Aabb,
    pub views: Vec<SceneView>,
    pub classes: Vec<QueryEmbedding>,
    pub gt_points: Option<LabeledPoints>,
    /// Analytic description the scene was generated from, if any.
    pub gt_spec: Option<SynthSceneSpec>,
}

impl Scene {
    /// Shared feature dimension of all views (from full maps or crops).
    pub fn feature_dim(&self) -> Result<Option<usize>> {
        let mut dim: Option<(usize, &str)> = None;
        for v in &self.views {
            let d = v
                .feature
                .as_ref()
                .map(|f| f.channels)
                .or_else(|| v.crops.as_ref().and_then(|c| c.first()).map(|c| c.feature.channels));
            if let Some(d) = d {
                match dim {
                    Some((d0, name)) if d0 != d => {
                        return Err(Error::DimensionMismatch(format!(
                            "view '{}' has feature dimension {d}, view '{name}' has {d0}",
                            v.name
                        )))
                    }
                    None => dim = Some((d, &v.name)),
                    _ => {}
                }
            }
        }
        Ok(dim.map(|d| d.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestView {
    name: String,
    width: usize,
    height: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    /// World-from-camera transform, row-major.
    pose: [[f64; 4]; 4],
    depth: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    crops: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    normal: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    bounds_min: [f64; 3],
    bounds_max: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    classes: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_points: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_spec: Option<String>,
    views: Vec<ManifestView>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::file(path, e.to_string()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e.to_string()))?;
    }
    fs::write(path, text).map_err(|e| Error::file(path, e.to_string()))
}

/// Parses a crop manifest: one `anchor_x anchor_y width height path` row
/// per crop, paths relative to the manifest.
pub fn read_crop_manifest(path: &Path) -> Result<Vec<CropFeature>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut crops = Vec::new();
    for (n, line) in read_text(path)?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || {
            Error::file(
                path,
                format!("line {}: expected 'anchor_x anchor_y width height path'", n + 1),
            )
        };
        if f.len() != 5 {
            return Err(bad());
        }
        let nums: Vec<usize> = f[..4]
            .iter()
            .map(|s| s.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let feature = read_image(&base.join(f[4]))?;
        if feature.width != nums[2] || feature.height != nums[3] {
            return Err(Error::file(
                path,
                format!(
                    "line {}: crop is {}x{}, manifest says {}x{}",
                    n + 1,
                    feature.width,
                    feature.height,
                    nums[2],
                    nums[3]
                ),
            ));
        }
        crops.push(CropFeature {
            anchor: (nums[0], nums[1]),
            feature,
        });
    }
    Ok(crops)
}

/// Writes each crop as `<stem>_<k>.limg` next to the manifest.
pub fn write_crop_manifest(path: &Path, crops: &[CropFeature]) -> Result<()> {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("crop");
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut text = String::from("# anchor_x anchor_y width height path\n");
    for (k, c) in crops.iter().enumerate() {
        let name = format!("{stem}_{k:03}.limg");
        write_image(&dir.join(&name), &c.feature)?;
        text.push_str(&format!(
            "{} {} {} {} {name}\n",
            c.anchor.0, c.anchor.1, c.feature.width, c.feature.height
        ));
    }
    write_text(path, &text)
}

/// Parses a class-embedding manifest: one `label path` row per class.
pub fn read_class_manifest(path: &Path) -> Result<Vec<QueryEmbedding>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in read_text(path)?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((label, file)) = line.split_once(char::is_whitespace) else {
            return Err(Error::file(path, format!("line {}: expected 'label path'", n + 1)));
        };
        let v = read_embedding(&base.join(file.trim()))?;
        out.push(QueryEmbedding::new(label, v).map_err(|e| Error::file(path, e.to_string()))?);
    }
    Ok(out)
}

pub fn write_class_manifest(path: &Path, classes: &[QueryEmbedding]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut text = String::from("# label path\n");
    for c in classes {
        if c.label.chars().any(char::is_whitespace) {
            return Err(Error::domain(format!("class label '{}' contains whitespace", c.label)));
        }
        let name = format!("classes/{}.emb", c.label);
        write_embedding(&dir.join(&name), &c.vector)?;
        text.push_str(&format!("{} {name}\n", c.label));
    }
    write_text(path, &text)
}

/// Writes a scene directory and returns the manifest path.
pub fn save_scene(dir: &Path, scene: &Scene) -> Result<PathBuf> {
    let mut views = Vec::new();
    for v in &scene.views {
        let c = &v.camera;
        let rel = |kind: &str, ext: &str| format!("{kind}/{}.{ext}", v.name);
        let depth = rel("depth", "limg");
        write_image(&dir.join(&depth), &v.depth)?;
        let feature = match &v.feature {
            Some(f) => {
                let p = rel("features", "limg");
                write_image(&dir.join(&p), f)?;
                Some(p)
            }
            None => None,
        };
        let crops = match &v.crops {
            Some(cr) => {
                let p = rel("crops", "txt");
                write_crop_manifest(&dir.join(&p), cr)?;
                Some(p)
            }
            None => None,
        };
        let normal = match &v.normal {
            Some(n) => {
                let p = rel("normals", "limg");
                write_image(&dir.join(&p), n)?;
                Some(p)
            }
            None => None,
        };
        let labels = match &v.labels {
            Some(l) => {
                let p = rel("labels", "limg");
                write_image(&dir.join(&p), l)?;
                Some(p)
            }
            None => None,
        };
        views.push(ManifestView {
            name: v.name.clone(),
            width: c.width,
            height: c.height,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            pose: c.world_from_camera.to_rows(),
            depth,
            feature,
            crops,
            normal,
            labels,
        });
    }
    let classes = if scene.classes.is_empty() {
        None
    } else {
        write_class_manifest(&dir.join("classes.txt"), &scene.classes)?;
        Some("classes.txt".to_string())
    };
    let gt_points = match &scene.gt_points {
        Some(gt) => {
            let labels = gt.labels.iter().map(|l| *l as i32).collect();
            write_ply(
                &dir.join("gt_points.ply"),
                &PlyData::points(&gt.points, Some(labels)),
                PlyFormat::Binary,
            )?;
            Some("gt_points.ply".to_string())
        }
        None => None,
    };
    let gt_spec = match &scene.gt_spec {
        Some(spec) => {
            let text = toml::to_string(spec).map_err(|e| Error::format(e.to_string()))?;
            write_text(&dir.join("synth.toml"), &text)?;
            Some("synth.toml".to_string())
        }
        None => None,
    };
    let b = &scene.bounds;
    let manifest = Manifest {
        version: 1,
        bounds_min: [b.min.x, b.min.y, b.min.z],
        bounds_max: [b.max.x, b.max.y, b.max.z],
        classes,
        gt_points,
        gt_spec,
        views,
    };
    let path = dir.join(MANIFEST_NAME);
    let text = toml::to_string(&manifest).map_err(|e| Error::format(e.to_string()))?;
    write_text(&path, &text)?;
    Ok(path)
}

/// Loads a scene from its manifest file or from the directory holding it.
pub fn load_scene(path: &Path) -> Result<Scene> {
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    };
    let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let m: Manifest =
        toml::from_str(&read_text(&manifest_path)?).map_err(|e| Error::file(&manifest_path, e.to_string()))?;
    let in_manifest = |msg: String| Error::file(&manifest_path, msg);
    let mut views = Vec::with_capacity(m.views.len());
    for v in &m.views {
        let pose = Pose::from_rows(&v.pose).map_err(|e| in_manifest(format!("view '{}' pose: {e}", v.name)))?;
        let camera = Camera::new(v.fx, v.fy, v.cx, v.cy, v.width, v.height, pose)
            .map_err(|e| in_manifest(format!("view '{}' intrinsics: {e}", v.name)))?;
        let load = |rel: &str, channels: Option<usize>| -> Result<ImagePlane> {
            let p = root.join(rel);
            let img = read_image(&p)?;
            if img.width != v.width || img.height != v.height || channels.is_some_and(|c| c != img.channels) {
                return Err(Error::file(
                    &p,
                    format!(
                        "view '{}': map is {}x{}x{}, camera is {}x{}",
                        v.name, img.width, img.height, img.channels, v.width, v.height
                    ),
                ));
            }
            Ok(img)
        };
        let depth = load(&v.depth, Some(1))?;
        let feature = v.feature.as_deref().map(|p| load(p, None)).transpose()?;
        let normal = v.normal.as_deref().map(|p| load(p, Some(3))).transpose()?;
        let labels = v.labels.as_deref().map(|p| load(p, Some(1))).transpose()?;
        let crops = v
            .crops
            .as_deref()
            .map(|p| read_crop_manifest(&root.join(p)))
            .transpose()?;
        views.push(SceneView {
            name: v.name.clone(),
            camera,
            depth,
            feature,
            crops,
            normal,
            labels,
        });
    }
    let classes = match &m.classes {
        Some(p) => read_class_manifest(&root.join(p))?,
        None => Vec::new(),
    };
    let gt_points = match &m.gt_points {
        Some(p) => {
            let path = root.join(p);
            let data = read_ply(&path)?;
            let labels = data.labels.ok_or_else(|| Error::file(&path, "point labels missing"))?;
            if labels.iter().any(|l| *l < 0) {
                return Err(Error::file(&path, "negative point label"));
            }
            Some(LabeledPoints {
                points: data.vertices,
                labels: labels.into_iter().map(|l| l as usize).collect(),
            })
        }
        None => None,
    };
    let gt_spec = match &m.gt_spec {
        Some(p) => {
            let path = root.join(p);
            Some(toml::from_str(&read_text(&path)?).map_err(|e| Error::file(&path, e.to_string()))?)
        }
        None => None,
    };
    let scene = Scene {
        bounds: Aabb::new(Vec3::from(m.bounds_min), Vec3::from(m.bounds_max)),
        views,
        classes,
        gt_points,
        gt_spec,
    };
    let dim = scene.feature_dim().map_err(|e| in_manifest(e.to_string()))?;
    if let (Some(d), Some(c)) = (dim, scene.classes.iter().find(|c| Some(c.dim()) != dim)) {
        return Err(in_manifest(format!(
            "class '{}' has dimension {}, views have {d}",
            c.label,
            c.dim()
        )));
    }
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> Scene {
        let pose = Pose::look_at(Vec3::new(0.0, -2.0, 0.5), Vec3::zeros(), Vec3::z()).unwrap();
        let camera = Camera::with_fov(6, 4, 50.0, pose).unwrap();
        let mut depth = ImagePlane::filled(6, 4, &[2.0]);
        depth.invalidate(0, 0);
        Scene {
            bounds: Aabb::cube(Vec3::zeros(), 1.0),
            views: vec![SceneView {
                name: "v0".into(),
                camera,
                depth,
                feature: Some(ImagePlane::filled(6, 4, &[0.5, -0.5, 1.0])),
                crops: Some(vec![CropFeature {
                    anchor: (1, 1),
                    feature: ImagePlane::filled(3, 2, &[1.0, 0.0, 0.0]),
                }]),
                normal: Some(ImagePlane::filled(6, 4, &[0.0, 0.0, 1.0])),
                labels: Some(ImagePlane::filled(6, 4, &[2.0])),
            }],
            classes: vec![QueryEmbedding::new("chair", vec![1.0, 0.0, 0.0]).unwrap()],
            gt_points: Some(LabeledPoints {
                points: vec![Vec3::new(0.25, 0.5, -0.125)],
                labels: vec![3],
            }),
            gt_spec: None,
        }
    }

    #[test]
    fn minimal_scene_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let scene = minimal();
        let path = save_scene(dir.path(), &scene).unwrap();
        let back = load_scene(&path).unwrap();
        assert_eq!(back, scene);
        assert_eq!(load_scene(dir.path()).unwrap(), scene);
    }

    #[test]
    fn reflected_pose_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = save_scene(dir.path(), &minimal()).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut m: Manifest = toml::from_str(&text).unwrap();
        for r in 0..3 {
            m.views[0].pose[r][0] = -m.views[0].pose[r][0];
        }
        fs::write(&path, toml::to_string(&m).unwrap()).unwrap();
        match load_scene(&path) {
            Err(Error::File { message, .. }) => assert!(message.contains("v0"), "{message}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn feature_dimension_mismatch_names_both_views() {
        let mut scene = minimal();
        let mut v1 = scene.views[0].clone();
        v1.name = "v1".into();
        v1.feature = Some(ImagePlane::filled(6, 4, &[1.0, 2.0]));
        v1.crops = None;
        scene.views.push(v1);
        let dir = tempfile::tempdir().unwrap();
        let path = save_scene(dir.path(), &scene).unwrap();
        let msg = load_scene(&path).unwrap_err().to_string();
        assert!(msg.contains("'v1'") && msg.contains("'v0'"), "{msg}");
    }

    #[test]
    fn missing_file_is_reported_with_its_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = save_scene(dir.path(), &minimal()).unwrap();
        fs::remove_file(dir.path().join("depth/v0.limg")).unwrap();
        match load_scene(&path) {
            Err(Error::File { path, .. }) => assert!(path.ends_with("depth/v0.limg")),
            other => panic!("{other:?}"),
        }
    }
}
