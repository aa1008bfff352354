//! Flat `key = value` configuration covering every stage.
//!
//! Files use TOML syntax; dotted keys and `[section]` tables both flatten
//! to `section.key`. Later assignments override earlier ones.

use crate::error::{Error, Result};
use crate::feat2d::AttentionConfig;
use crate::fuse3d::FusionConfig;
use crate::geomreg::PatchSpec;
use crate::render::RenderConfig;
use crate::tsdf::BlendConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    /// Fine octree level; `None` takes the scene's own level (or 7).
    pub level: Option<u32>,
    pub coarse_levels: u32,
    /// Truncation distance per level, in that level's voxel edges.
    pub trunc_voxels: f64,
    pub blend: BlendConfig,
    /// Interior density, in units of 1 / voxel edge.
    pub density_scale: f64,
    /// Width of the density transition, in voxel edges.
    pub density_sharpness: f64,
    pub render: RenderConfig,
    pub fusion_beta_voxels: f64,
    pub fusion_sigma_c_voxels: f64,
    pub fusion_margin_voxels: f64,
    pub fusion_eps: f64,
    pub fusion_batch_size: usize,
    pub attention: AttentionConfig,
    /// Stitching window bandwidth in pixels; `None` uses crop extent / 4.
    pub stitch_sigma_g: Option<f64>,
    pub stitch_eps: f64,
    pub query_threshold: f64,
    pub transfer_k: usize,
    pub patch: PatchSpec,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            level: None,
            coarse_levels: 2,
            trunc_voxels: 4.0,
            blend: BlendConfig::default(),
            density_scale: 20.0,
            density_sharpness: 0.1,
            render: RenderConfig::default(),
            fusion_beta_voxels: 2.0,
            fusion_sigma_c_voxels: 1.0,
            fusion_margin_voxels: 2.0,
            fusion_eps: 1e-8,
            fusion_batch_size: 65536,
            attention: AttentionConfig::default(),
            stitch_sigma_g: None,
            stitch_eps: 1e-8,
            query_threshold: 0.6,
            transfer_k: 8,
            patch: PatchSpec::default(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "level",
    "coarse_levels",
    "trunc_voxels",
    "blend.tau_q",
    "blend.temperature",
    "build.density_scale",
    "build.density_sharpness",
    "render.samples_per_interval",
    "render.alpha_valid_min",
    "render.min_transmittance",
    "fusion.beta_voxels",
    "fusion.sigma_c_voxels",
    "fusion.margin_voxels",
    "fusion.eps",
    "fusion.batch_size",
    "attention.cos_threshold",
    "attention.iterations",
    "attention.token_stride",
    "stitch.sigma_g",
    "stitch.eps",
    "query.threshold",
    "transfer.k",
    "patch.size",
    "patch.stride",
    "patch.eps_std",
];

fn as_f64(key: &str, v: &toml::Value) -> Result<f64> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        _ => Err(Error::Config(format!("{key}: expected a number, got {v}"))),
    }
}

fn as_usize(key: &str, v: &toml::Value) -> Result<usize> {
    match v {
        toml::Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(Error::Config(format!(
            "{key}: expected a non-negative integer, got {v}"
        ))),
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, toml::Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

impl Config {
    pub fn set(&mut self, key: &str, v: &toml::Value) -> Result<()> {
        let f = || as_f64(key, v);
        let u = || as_usize(key, v);
        match key {
            "level" => self.level = Some(u()? as u32),
            "coarse_levels" => self.coarse_levels = u()? as u32,
            "trunc_voxels" => self.trunc_voxels = f()?,
            "blend.tau_q" => self.blend.tau_q = f()?,
            "blend.temperature" => self.blend.temperature = f()?,
            "build.density_scale" => self.density_scale = f()?,
            "build.density_sharpness" => self.density_sharpness = f()?,
            "render.samples_per_interval" => self.render.samples_per_interval = u()?,
            "render.alpha_valid_min" => self.render.alpha_valid_min = f()?,
            "render.min_transmittance" => self.render.min_transmittance = f()?,
            "fusion.beta_voxels" => self.fusion_beta_voxels = f()?,
            "fusion.sigma_c_voxels" => self.fusion_sigma_c_voxels = f()?,
            "fusion.margin_voxels" => self.fusion_margin_voxels = f()?,
            "fusion.eps" => self.fusion_eps = f()?,
            "fusion.batch_size" => self.fusion_batch_size = u()?,
            "attention.cos_threshold" => self.attention.cos_threshold = f()?,
            "attention.iterations" => self.attention.iterations = u()?,
            "attention.token_stride" => self.attention.token_stride = u()?,
            "stitch.sigma_g" => {
                let s = f()?;
                self.stitch_sigma_g = (s > 0.0).then_some(s);
            }
            "stitch.eps" => self.stitch_eps = f()?,
            "query.threshold" => self.query_threshold = f()?,
            "transfer.k" => self.transfer_k = u()?,
            "patch.size" => self.patch.size = u()?,
            "patch.stride" => self.patch.stride = u()?,
            "patch.eps_std" => self.patch.eps_std = f()?,
            other => {
                return Err(Error::Config(format!(
                    "unknown key '{other}' (known keys: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies every assignment in a configuration text.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let mut pairs = Vec::new();
        flatten("", &table, &mut pairs);
        for (k, v) in pairs {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got '{assignment}'")))?;
        let value: toml::Table = format!("v = {}", v.trim())
            .parse()
            .map_err(|e| Error::Config(format!("{}: {e}", k.trim())))?;
        self.set(k.trim(), &value["v"])
    }

    /// Renders every key with its current value.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        if let Some(l) = self.level {
            line("level", l.to_string());
        }
        line("coarse_levels", self.coarse_levels.to_string());
        line("trunc_voxels", format!("{:?}", self.trunc_voxels));
        line("blend.tau_q", format!("{:?}", self.blend.tau_q));
        line("blend.temperature", format!("{:?}", self.blend.temperature));
        line("build.density_scale", format!("{:?}", self.density_scale));
        line("build.density_sharpness", format!("{:?}", self.density_sharpness));
        line(
            "render.samples_per_interval",
            self.render.samples_per_interval.to_string(),
        );
        line("render.alpha_valid_min", format!("{:?}", self.render.alpha_valid_min));
        line(
            "render.min_transmittance",
            format!("{:?}", self.render.min_transmittance),
        );
        line("fusion.beta_voxels", format!("{:?}", self.fusion_beta_voxels));
        line("fusion.sigma_c_voxels", format!("{:?}", self.fusion_sigma_c_voxels));
        line("fusion.margin_voxels", format!("{:?}", self.fusion_margin_voxels));
        line("fusion.eps", format!("{:?}", self.fusion_eps));
        line("fusion.batch_size", self.fusion_batch_size.to_string());
        line("attention.cos_threshold", format!("{:?}", self.attention.cos_threshold));
        line("attention.iterations", self.attention.iterations.to_string());
        line("attention.token_stride", self.attention.token_stride.to_string());
        line("stitch.sigma_g", format!("{:?}", self.stitch_sigma_g.unwrap_or(0.0)));
        line("stitch.eps", format!("{:?}", self.stitch_eps));
        line("query.threshold", format!("{:?}", self.query_threshold));
        line("transfer.k", self.transfer_k.to_string());
        line("patch.size", self.patch.size.to_string());
        line("patch.stride", self.patch.stride.to_string());
        line("patch.eps_std", format!("{:?}", self.patch.eps_std));
        s
    }

    pub fn fusion(&self, edge: f64) -> FusionConfig {
        FusionConfig {
            beta: self.fusion_beta_voxels * edge,
            sigma_c: self.fusion_sigma_c_voxels * edge,
            eps: self.fusion_eps,
            occlusion_margin: self.fusion_margin_voxels * edge,
            batch_size: self.fusion_batch_size,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_and_overrides() {
        let mut c = Config::default();
        c.apply_text("level = 6\nquery.threshold = 0.5\n[fusion]\nbeta_voxels = 3\nbatch_size = 7\n")
            .unwrap();
        assert_eq!(c.level, Some(6));
        assert_eq!(c.fusion_beta_voxels, 3.0);
        assert_eq!(c.fusion_batch_size, 7);
        assert_eq!(c.query_threshold, 0.5);
        c.apply_override("attention.iterations=5").unwrap();
        assert_eq!(c.attention.iterations, 5);
        let mut d = Config::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(d, c);
    }

    #[test]
    fn bad_keys_and_values_are_config_errors() {
        let mut c = Config::default();
        assert!(matches!(c.apply_text("nope = 1"), Err(Error::Config(_))));
        assert!(matches!(c.apply_override("transfer.k=-1"), Err(Error::Config(_))));
        assert!(matches!(c.apply_override("level"), Err(Error::Config(_))));
        assert!(matches!(c.apply_override("fusion.eps=\"x\""), Err(Error::Config(_))));
    }
}
