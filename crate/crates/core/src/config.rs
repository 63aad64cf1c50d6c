//! Experiment configuration: one TOML file plus `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diff::AdamConfig;
use crate::error::{Error, Result};
use crate::eval::PlyMode;
use crate::fields::{NetworkConfig, RadianceConfig};
use crate::geom::Vec3;
use crate::grid::GridConfig;
use crate::losses::LossWeights;
use crate::scene::{CameraRig, SceneOracle};

/// Relative output directories are resolved against this variable when set.
pub const OUTPUT_ROOT_ENV: &str = "OCCLAB_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub scene: SceneOracle,
    pub dataset: DatasetConfig,
    pub network: NetworkConfig,
    pub radiance: RadianceConfig,
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
    pub optimizer: AdamConfig,
    pub occupancy: OccupancyStage,
    pub guided: GuidedStage,
    pub grid: GridConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/desk"),
            scene: SceneOracle::desk(),
            dataset: DatasetConfig::default(),
            network: NetworkConfig::default(),
            radiance: RadianceConfig::default(),
            loss: LossConfig::default(),
            sampler: SamplerConfig::default(),
            optimizer: AdamConfig::default(),
            occupancy: OccupancyStage::default(),
            guided: GuidedStage::default(),
            grid: GridConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub rig: CameraRig,
    /// Midpoint samples per ray for ground-truth renders.
    pub quadrature: usize,
    pub background: Vec3,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { rig: CameraRig::default(), quadrature: 1024, background: [0.0; 3] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub w_r: f64,
    pub w_o: f64,
    pub w_d: f64,
    /// Virtual copies of the empty branch in the occupancy loss.
    pub v: usize,
}

impl Default for LossConfig {
    /// `w_o` is raised from the large-scale 0.0005: with 6k points per step
    /// the rendering loss wins and every point routes to the scene networks.
    fn default() -> Self {
        let w = LossWeights::default();
        Self { w_r: w.w_r, w_o: 0.05, w_d: w.w_d, v: 8 }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights { w_r: self.w_r, w_o: self.w_o, w_d: self.w_d }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Stratified samples per ray while training the occupancy field.
    pub samples_per_ray: usize,
    /// Samples per ray of the dense radiance-field baseline.
    pub dense_samples: usize,
    /// Coarse samples per ray checked by an occupancy predicate.
    pub coarse: usize,
    /// Fine samples per kept coarse sample.
    pub split: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { samples_per_ray: 128, dense_samples: 512, coarse: 128, split: 8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OccupancyStage {
    pub steps: usize,
    pub rays_per_step: usize,
    /// Steps between rows of the loss log.
    pub log_interval: usize,
    /// Steps between rows of the branch statistics.
    pub stats_interval: usize,
    pub checkpoint_interval: usize,
    /// Keep a momentum grid updated from the field during training.
    pub track_grid: bool,
}

impl Default for OccupancyStage {
    fn default() -> Self {
        Self {
            steps: 5000,
            rays_per_step: 96,
            log_interval: 50,
            stats_interval: 50,
            checkpoint_interval: 1000,
            track_grid: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuideMode {
    /// Coarse samples filtered by the frozen occupancy network.
    Network,
    /// Coarse samples filtered by the momentum grid.
    Grid,
    /// Plain stratified sampling.
    Dense,
}

impl std::str::FromStr for GuideMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "network" | "guided" => Ok(Self::Network),
            "grid" => Ok(Self::Grid),
            "dense" => Ok(Self::Dense),
            other => Err(Error::Config(format!("unknown sampling mode '{other}' (network, grid, dense)"))),
        }
    }
}

impl GuideMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Network => "network",
            Self::Grid => "grid",
            Self::Dense => "dense",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidedStage {
    pub steps: usize,
    pub rays_per_step: usize,
    pub log_interval: usize,
    /// Steps between validation renders; the final step is always evaluated.
    pub eval_interval: usize,
    pub checkpoint_interval: usize,
}

impl Default for GuidedStage {
    fn default() -> Self {
        Self { steps: 2000, rays_per_step: 32, log_interval: 50, eval_interval: 250, checkpoint_interval: 500 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Resolution of the occupancy grids compared against the oracle.
    pub resolution: usize,
    /// Probes per cell when converting the network to a grid; 1 means the
    /// cell center only, more adds seeded jittered probes (any occupied wins).
    pub probes: usize,
    pub ply_mode: PlyMode,
    /// Pixels per side of the point-cloud export view.
    pub cloud_image: usize,
    pub cloud_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { resolution: 32, probes: 1, ply_mode: PlyMode::Rgba, cloud_image: 32, cloud_samples: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub resolutions: Vec<usize>,
    pub rays: usize,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { resolutions: vec![32, 64, 128], rays: 256, repeats: 3 }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.dataset.rig.validate()?;
        self.network.validate()?;
        self.radiance.validate()?;
        self.loss.weights().validate()?;
        self.grid.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.loss.v == 0 {
            return bad("loss.v must be at least 1");
        }
        let s = &self.sampler;
        if s.samples_per_ray < 2 || s.dense_samples < 2 || s.coarse < 2 || s.split == 0 {
            return bad("sampler counts must be at least 2 (split at least 1)");
        }
        if self.occupancy.rays_per_step == 0 || self.guided.rays_per_step == 0 {
            return bad("rays_per_step must be positive");
        }
        for k in [
            self.occupancy.log_interval,
            self.occupancy.stats_interval,
            self.occupancy.checkpoint_interval,
            self.guided.log_interval,
            self.guided.eval_interval,
            self.guided.checkpoint_interval,
        ] {
            if k == 0 {
                return bad("intervals must be positive");
            }
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return bad("optimizer.lr must be positive");
        }
        if self.eval.resolution == 0 || self.eval.probes == 0 {
            return bad("eval.resolution and eval.probes must be positive");
        }
        if self.bench.resolutions.is_empty() || self.bench.rays == 0 || self.bench.repeats == 0 {
            return bad("bench needs resolutions, rays and repeats");
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = toml::Value::Table(value).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or the defaults when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Output directory after applying the output-root variable.
    pub fn resolved_output(&self) -> PathBuf {
        resolve_output(&self.output_dir, std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
    }
}

fn resolve_output(dir: &Path, root: Option<PathBuf>) -> PathBuf {
    match root {
        Some(r) if dir.is_relative() => r.join(dir),
        _ => dir.to_path_buf(),
    }
}

/// `a.b.c=value`; the value is parsed as a TOML literal, falling back to a
/// bare string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) =
        spec.split_once('=').ok_or_else(|| Error::Config(format!("override '{spec}' is not key=value")))?;
    let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key '{key}'")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("override key '{key}' crosses a value")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!((cfg.loss.w_r, cfg.loss.w_o, cfg.loss.w_d), (1.0, 0.05, 0.1));
        assert_eq!(cfg.optimizer.lr, 5e-4);
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_apply_and_validate() {
        let sets = ["loss.v=80".to_string(), "network.n_scene=8".into(), "output_dir=elsewhere".into()];
        let cfg = ExperimentConfig::from_toml_str("seed = 3\n", &sets).unwrap();
        assert_eq!((cfg.seed, cfg.loss.v, cfg.network.n_scene), (3, 80, 8));
        assert_eq!(cfg.output_dir, PathBuf::from("elsewhere"));
        assert!(ExperimentConfig::from_toml_str("", &["loss.v=0".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str("", &["nonsense".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str("bogus = 1", &[]).is_err());
    }

    #[test]
    fn output_root_applies_to_relative_paths() {
        let root = Some(PathBuf::from("/tmp/root"));
        assert_eq!(resolve_output(Path::new("runs/a"), root.clone()), PathBuf::from("/tmp/root/runs/a"));
        assert_eq!(resolve_output(Path::new("/abs"), root), PathBuf::from("/abs"));
        assert_eq!(resolve_output(Path::new("runs/a"), None), PathBuf::from("runs/a"));
    }
}
