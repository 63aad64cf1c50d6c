//! Pipeline stages behind the command-line subcommands. Each stage reads and
//! writes under the configured output directory and leaves a `run.json`
//! manifest with the resolved config and content hashes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, GuideMode};
use crate::diff::{Checkpoint, ParamStore};
use crate::error::{Error, Result};
use crate::eval::{
    self, csv_value, occupancy_metrics, predicate_to_grid, psnr, CloudPoint, OccStats, OccupancyMetrics, TableRow,
};
use crate::fields::{count_parameters, Component, NetworkConfig, OccupancyField, RadianceConfig, RadianceField};
use crate::geom::{GridSpec, OccupancyMask, Vec3};
use crate::grid::{memory_report, GridConfig, MemoryReport, OccGrid};
use crate::losses::density_loss;
use crate::rendering::{
    generate_rays, io, render_image, stratified_sample, Camera, Intrinsics, RadianceQuery, RenderSettings,
    RenderedImage, Sampler,
};
use crate::scene::{make_dataset, render_ground_truth, Dataset, DatasetManifest, Split};
use crate::train::{occupancy_density, Bound, LossRecord, OccupancyTrainer, RadianceRecord, RadianceTrainer, RayPool};

pub const RUN_MANIFEST: &str = "run.json";
pub const RUN_FORMAT: &str = "occlab-run";

/// Where every stage puts its files.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self { root: cfg.resolved_output() }
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn occupancy(&self) -> PathBuf {
        self.root.join("occupancy")
    }

    pub fn occupancy_checkpoint(&self) -> PathBuf {
        self.occupancy().join("occupancy.json")
    }

    /// Grid refreshed alongside occupancy training.
    pub fn tracked_grid(&self) -> PathBuf {
        self.occupancy().join("grid.bin")
    }

    pub fn guided(&self, mode: GuideMode) -> PathBuf {
        self.root.join("guided").join(mode.name())
    }

    pub fn radiance_checkpoint(&self, mode: GuideMode) -> PathBuf {
        self.guided(mode).join("radiance.json")
    }

    pub fn grid_baseline(&self) -> PathBuf {
        self.root.join("grid_baseline")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn bench(&self) -> PathBuf {
        self.root.join("bench")
    }

    pub fn pointcloud(&self) -> PathBuf {
        self.root.join("pointcloud")
    }

    pub fn render(&self) -> PathBuf {
        self.root.join("render")
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Hash of parameter values only, used to show a frozen network stayed frozen.
pub fn param_hash(store: &ParamStore) -> String {
    let mut h = Sha256::new();
    for id in store.ids() {
        h.update(store.name(id).as_bytes());
        for v in store.value(id).data() {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

/// Reproducibility record written next to every stage's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub command: String,
    pub config: ExperimentConfig,
    /// File (relative to the output root where possible) to sha256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format("run manifest", path, e.to_string()))
    }
}

fn hash_map(layout: &Layout, files: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    files
        .iter()
        .map(|f| {
            let key = f.strip_prefix(&layout.root).unwrap_or(f).to_string_lossy().replace('\\', "/");
            Ok((key, sha256_file(f)?))
        })
        .collect()
}

fn write_manifest(
    layout: &Layout,
    dir: &Path,
    command: &str,
    cfg: &ExperimentConfig,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> Result<()> {
    let manifest = RunManifest {
        format: RUN_FORMAT.into(),
        version: 1,
        command: command.into(),
        config: cfg.clone(),
        inputs: hash_map(layout, inputs)?,
        outputs: hash_map(layout, outputs)?,
    };
    write_json(&dir.join(RUN_MANIFEST), &manifest)
}

fn checkpoint_meta(kind: &str, cfg: &ExperimentConfig, extra: serde_json::Value) -> serde_json::Value {
    serde_json::json!({
        "kind": kind,
        "network": cfg.network,
        "radiance": cfg.radiance,
        "config": cfg,
        "extra": extra,
    })
}

fn meta_field<T: serde::de::DeserializeOwned>(ckpt: &Checkpoint, path: &Path, key: &str) -> Result<T> {
    let value = ckpt.meta.get(key).cloned().ok_or_else(|| Error::format("checkpoint", path, format!("meta lacks {key:?}")))?;
    serde_json::from_value(value).map_err(|e| Error::format("checkpoint", path, e.to_string()))
}

fn checkpoint_kind(ckpt: &Checkpoint, path: &Path) -> Result<String> {
    meta_field(ckpt, path, "kind")
}

/// A trained occupancy field restored from its checkpoint.
pub struct LoadedOccupancy {
    pub field: OccupancyField,
    pub store: ParamStore,
    pub step: u64,
}

pub fn load_occupancy(path: &Path) -> Result<LoadedOccupancy> {
    let ckpt = Checkpoint::load(path)?;
    let kind = checkpoint_kind(&ckpt, path)?;
    if kind != "occupancy" {
        return Err(Error::format("checkpoint", path, format!("expected an occupancy checkpoint, found {kind:?}")));
    }
    let net: NetworkConfig = meta_field(&ckpt, path, "network")?;
    let mut store = ParamStore::new(0);
    let field = OccupancyField::new(&mut store, &net)?;
    store.load_checkpoint(&ckpt)?;
    Ok(LoadedOccupancy { field, store, step: ckpt.step })
}

pub struct LoadedRadiance {
    pub field: RadianceField,
    pub store: ParamStore,
    pub mode: GuideMode,
}

pub fn load_radiance(path: &Path) -> Result<LoadedRadiance> {
    let ckpt = Checkpoint::load(path)?;
    let kind = checkpoint_kind(&ckpt, path)?;
    if kind != "radiance" {
        return Err(Error::format("checkpoint", path, format!("expected a radiance checkpoint, found {kind:?}")));
    }
    let rc: RadianceConfig = meta_field(&ckpt, path, "radiance")?;
    let extra: serde_json::Value = meta_field(&ckpt, path, "extra")?;
    let mode = extra
        .get("mode")
        .and_then(|m| m.as_str())
        .ok_or_else(|| Error::format("checkpoint", path, "radiance checkpoint lacks its sampling mode"))?
        .parse::<GuideMode>()?;
    let mut store = ParamStore::new(0);
    let field = RadianceField::new(&mut store, &rc)?;
    store.load_checkpoint(&ckpt)?;
    Ok(LoadedRadiance { field, store, mode })
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} not found at {}", path.display())))
    }
}

// ---------------------------------------------------------------- generate

/// Renders the oracle scene into `<out>/dataset`. A non-empty directory is
/// only replaced when `force` is set.
pub fn generate_scene(cfg: &ExperimentConfig, force: bool) -> Result<DatasetManifest> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let dir = layout.dataset();
    let non_empty = std::fs::read_dir(&dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty {
        if !force {
            return Err(Error::Config(format!("{} is not empty; pass --force to replace it", dir.display())));
        }
        std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let d = &cfg.dataset;
    let manifest = make_dataset(&dir, &cfg.scene, &d.rig, d.quadrature, d.background)?;
    let mut outputs = vec![dir.join("manifest.json")];
    for f in &manifest.frames {
        outputs.push(dir.join(&f.image));
        outputs.push(dir.join(&f.depth));
    }
    write_manifest(&layout, &dir, "generate-scene", cfg, &[], &outputs)?;
    Ok(manifest)
}

fn load_dataset(layout: &Layout) -> Result<Dataset> {
    let dir = layout.dataset();
    require(&dir.join("manifest.json"), "dataset (run generate-scene first)")?;
    Dataset::load(&dir)
}

fn dataset_inputs(layout: &Layout) -> Vec<PathBuf> {
    vec![layout.dataset().join("manifest.json")]
}

// ---------------------------------------------------------------- occupancy

/// Routing statistics of a trained field on a fixed batch of training rays.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingProbe {
    pub points: usize,
    pub empty_fraction: f64,
    /// Gate-weighted mean density of empty-routed over scene-routed points.
    pub density_ratio: Option<f64>,
    /// Plain mean density of scene-routed over empty-routed points.
    pub sigma_ratio: Option<f64>,
}

/// Rays in the routing probe batch.
pub const PROBE_RAYS: usize = 512;

pub fn routing_probe(cfg: &ExperimentConfig, ds: &Dataset, field: &OccupancyField, store: &ParamStore) -> Result<RoutingProbe> {
    let pool = RayPool::new(ds, &ds.frames_in(Split::Train), ds.manifest.aabb)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5052_4f42_4500_0000);
    let (rays, _) = pool.draw(&mut rng, PROBE_RAYS);
    let batch = stratified_sample(&rays, cfg.sampler.samples_per_ray, None);
    let gates = field.gate_values(store, &batch.positions)?;
    let q = field.query(store, &batch.positions, &batch.directions)?;
    let e = field.cfg.empty_index();
    let (mut empty, mut scene) = (Vec::new(), Vec::new());
    for (i, (&k, &s)) in q.top1.iter().zip(&q.sigma).enumerate() {
        if k == e {
            empty.push((gates.get(i, e), s));
        } else {
            let o: f64 = (0..e).map(|j| gates.get(i, j)).sum();
            scene.push((o, s));
        }
    }
    let mask: Vec<bool> = q.top1.iter().map(|&k| k == e).collect();
    let stats = OccStats::collect(0, &q.sigma, &vec![0.0; q.sigma.len()], &mask);
    Ok(RoutingProbe {
        points: batch.len(),
        empty_fraction: empty.len() as f64 / batch.len() as f64,
        density_ratio: density_loss(&empty, &scene),
        sigma_ratio: stats.sigma_ratio(),
    })
}

/// Converts the field's routing to a grid by probing cell centers, plus
/// `probes - 1` seeded jittered points per cell.
pub fn network_to_grid(field: &OccupancyField, store: &ParamStore, spec: GridSpec, probes: usize, seed: u64) -> Result<OccupancyMask> {
    let mut mask = predicate_to_grid(spec, &|p| field.predict_occupied(store, p))?;
    if probes > 1 {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 1..probes {
            let points: Vec<Vec3> = (0..spec.cell_count())
                .map(|i| spec.point_in_cell(i, [rng.random(), rng.random(), rng.random()]))
                .collect();
            for (cell, hit) in mask.cells.iter_mut().zip(field.predict_occupied(store, &points)?) {
                *cell |= hit;
            }
        }
    }
    Ok(mask)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccupancySummary {
    pub steps: usize,
    pub last_losses: Option<LossRecord>,
    pub probe: RoutingProbe,
    pub resolution: usize,
    pub oracle_fraction: f64,
    pub network: OccupancyMetrics,
    pub grid: Option<OccupancyMetrics>,
}

fn write_csv(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let mut text = format!("{header}\n");
    for r in rows {
        text.push_str(&r);
        text.push('\n');
    }
    write_text(path, &text)
}

/// Trains the occupancy field. Writes `occupancy/checkpoints/step_*.json`
/// (step 0 included), `occupancy.json`, `loss.csv`, `stats.csv`, the
/// tracked `grid.bin` and `summary.json`. A non-finite loss stops training
/// with `last_good.json` holding the parameters before the failing step.
pub fn train_occupancy(cfg: &ExperimentConfig) -> Result<OccupancySummary> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let ds = load_dataset(&layout)?;
    let dir = layout.occupancy();
    let ckpt_dir = dir.join("checkpoints");
    create_dir(&ckpt_dir)?;

    let mut tr = OccupancyTrainer::new(cfg, &ds)?;
    let meta = |step: usize| checkpoint_meta("occupancy", cfg, serde_json::json!({ "step": step }));
    let save = |tr: &OccupancyTrainer, path: &Path| tr.store.to_checkpoint(meta(tr.step)).save(path);
    let mut outputs = Vec::new();
    let first = ckpt_dir.join("step_000000.json");
    save(&tr, &first)?;
    outputs.push(first);

    let stage = &cfg.occupancy;
    let (mut losses, mut stats) = (Vec::new(), Vec::new());
    let write_logs = |losses: &[LossRecord], stats: &[OccStats]| -> Result<()> {
        write_csv(&dir.join("loss.csv"), LossRecord::CSV_HEADER, losses.iter().map(LossRecord::csv_row))?;
        eval::write_stats_csv(&dir.join("stats.csv"), stats)
    };
    let started = Instant::now();
    for _ in 0..stage.steps {
        let before = tr.store.to_checkpoint(meta(tr.step));
        let out = match tr.step() {
            Ok(out) => out,
            Err(e) if e.is_numerical() => {
                before.save(&dir.join("last_good.json"))?;
                write_logs(&losses, &stats)?;
                log::error!("occupancy training stopped at step {}: {e}", tr.step + 1);
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let step = tr.step;
        if step % stage.log_interval == 0 {
            losses.push(out.losses);
            log::info!(
                "occupancy step {step}: l_f {:.5} l_r {:.5} f_e {:.3} ({:.1}s)",
                out.losses.l_f,
                out.losses.l_r,
                out.losses.f_e,
                started.elapsed().as_secs_f64()
            );
        }
        if step % stage.stats_interval == 0 {
            stats.push(out.stats);
        }
        if tr.grid_due() {
            tr.update_grid()?;
        }
        if step % stage.checkpoint_interval == 0 {
            let path = ckpt_dir.join(format!("step_{step:06}.json"));
            save(&tr, &path)?;
            outputs.push(path);
        }
    }
    write_logs(&losses, &stats)?;
    let final_path = layout.occupancy_checkpoint();
    save(&tr, &final_path)?;
    outputs.extend([final_path, dir.join("loss.csv"), dir.join("stats.csv")]);
    if let Some(grid) = &tr.grid {
        grid.save(&layout.tracked_grid())?;
        outputs.push(layout.tracked_grid());
    }

    let spec = GridSpec::new(cfg.eval.resolution, ds.manifest.aabb);
    let oracle = cfg.scene.occupancy_grid(spec);
    let net_mask = network_to_grid(&tr.field, &tr.store, spec, cfg.eval.probes, cfg.seed)?;
    let grid = match &tr.grid {
        Some(g) if g.spec == spec => Some(occupancy_metrics(&g.mask(), &oracle)?),
        _ => None,
    };
    let summary = OccupancySummary {
        steps: tr.step,
        last_losses: losses.last().copied(),
        probe: routing_probe(cfg, &ds, &tr.field, &tr.store)?,
        resolution: spec.res,
        oracle_fraction: oracle.occupied_fraction(),
        network: occupancy_metrics(&net_mask, &oracle)?,
        grid,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    outputs.push(dir.join("summary.json"));
    write_manifest(&layout, &dir, "train-occupancy", cfg, &dataset_inputs(&layout), &outputs)?;
    Ok(summary)
}

// ---------------------------------------------------------------- guided

/// Builds the sampler for `mode` and hands it to `f`. Guided modes read the
/// occupancy checkpoint or grid snapshot from the given paths.
pub fn with_sampler<T>(
    cfg: &ExperimentConfig,
    mode: GuideMode,
    occupancy: &Path,
    grid: &Path,
    f: impl FnOnce(&Sampler<'_>) -> Result<T>,
) -> Result<T> {
    let (coarse, split) = (cfg.sampler.coarse, cfg.sampler.split);
    match mode {
        GuideMode::Dense => f(&Sampler::Dense { samples: cfg.sampler.dense_samples }),
        GuideMode::Network => {
            require(occupancy, "occupancy checkpoint")?;
            let occ = load_occupancy(occupancy)?;
            let pred = |p: &[Vec3]| occ.field.predict_occupied(&occ.store, p);
            f(&Sampler::Guided { coarse, split, occupied: &pred })
        }
        GuideMode::Grid => {
            require(grid, "occupancy grid")?;
            let g = OccGrid::load(grid)?;
            let pred = |p: &[Vec3]| Ok(g.query_batch(p));
            f(&Sampler::Guided { coarse, split, occupied: &pred })
        }
    }
}

fn render_settings(ds: &Dataset) -> RenderSettings {
    RenderSettings { aabb: ds.manifest.aabb, background: ds.manifest.background, jitter_seed: None }
}

/// Mean PSNR over the validation frames, plus field evaluations per pixel.
fn validation_psnr(ds: &Dataset, field: &dyn RadianceQuery, sampler: &Sampler<'_>) -> Result<(f64, f64)> {
    let frames = ds.frames_in(Split::Val);
    let (mut total, mut evals, mut pixels) = (0.0, 0usize, 0usize);
    for &f in &frames {
        let img = render_image(&ds.camera(f), field, sampler, &render_settings(ds))?;
        total += psnr(&img.rgb, &ds.images[f]);
        evals += img.field_evaluations;
        pixels += img.rgb.len();
    }
    Ok((total / frames.len() as f64, evals as f64 / pixels as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidedSummary {
    pub mode: String,
    pub steps: usize,
    /// Mean radiance-field evaluations per training ray.
    pub field_points_per_ray: f64,
    /// Mean occupancy-predicate evaluations per training ray.
    pub predicate_points_per_ray: f64,
    pub final_psnr: f64,
    pub occupancy_hash_before: Option<String>,
    pub occupancy_hash_after: Option<String>,
}

pub const PSNR_HEADER: &str = "step,psnr,field_points_per_pixel";

/// Trains a fresh radiance field under `mode`. Writes `log.csv`, `psnr.csv`,
/// `radiance.json`, checkpoints and `summary.json` into `guided/<mode>`.
pub fn train_guided(
    cfg: &ExperimentConfig,
    mode: GuideMode,
    occupancy: Option<&Path>,
    grid: Option<&Path>,
) -> Result<GuidedSummary> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let occupancy = occupancy.map_or_else(|| layout.occupancy_checkpoint(), Path::to_path_buf);
    let grid = grid.map_or_else(|| layout.tracked_grid(), Path::to_path_buf);
    let ds = load_dataset(&layout)?;
    let dir = layout.guided(mode);
    let ckpt_dir = dir.join("checkpoints");
    create_dir(&ckpt_dir)?;

    let mut inputs = dataset_inputs(&layout);
    let hash_before = match mode {
        GuideMode::Network => {
            require(&occupancy, "occupancy checkpoint")?;
            inputs.push(occupancy.clone());
            Some(param_hash(&load_occupancy(&occupancy)?.store))
        }
        GuideMode::Grid => {
            inputs.push(grid.clone());
            None
        }
        GuideMode::Dense => None,
    };

    let mut tr = RadianceTrainer::new(cfg, &ds, mode)?;
    let stage = &cfg.guided;
    let meta = |step: usize| checkpoint_meta("radiance", cfg, serde_json::json!({ "mode": mode.name(), "step": step }));
    let mut outputs = Vec::new();
    let (records, psnrs) = with_sampler(cfg, mode, &occupancy, &grid, |sampler| {
        let mut records: Vec<RadianceRecord> = Vec::new();
        let mut psnrs: Vec<(usize, f64, f64)> = Vec::new();
        for _ in 0..stage.steps {
            let rec = tr.step(sampler)?;
            records.push(rec);
            let step = rec.step;
            if step % stage.log_interval == 0 {
                log::info!("{} step {step}: l_r {:.5} points/ray {:.1}", mode.name(), rec.l_r, rec.field_points as f64 / rec.rays as f64);
            }
            if step % stage.eval_interval == 0 || step == stage.steps {
                let (p, per_pixel) = validation_psnr(&ds, &Bound { field: &tr.field, store: &tr.store }, sampler)?;
                log::info!("{} step {step}: validation psnr {p:.3}", mode.name());
                psnrs.push((step, p, per_pixel));
            }
            if step % stage.checkpoint_interval == 0 {
                let path = ckpt_dir.join(format!("step_{step:06}.json"));
                tr.store.to_checkpoint(meta(step)).save(&path)?;
                outputs.push(path);
            }
        }
        if psnrs.is_empty() {
            let (p, per_pixel) = validation_psnr(&ds, &Bound { field: &tr.field, store: &tr.store }, sampler)?;
            psnrs.push((0, p, per_pixel));
        }
        Ok((records, psnrs))
    })?;

    let logged = records.iter().filter(|r| r.step % stage.log_interval == 0);
    write_csv(&dir.join("log.csv"), RadianceRecord::CSV_HEADER, logged.map(RadianceRecord::csv_row))?;
    write_csv(
        &dir.join("psnr.csv"),
        PSNR_HEADER,
        psnrs.iter().map(|(s, p, e)| format!("{s},{},{e:.4}", csv_value(*p))),
    )?;
    let final_path = layout.radiance_checkpoint(mode);
    tr.store.to_checkpoint(meta(tr.step)).save(&final_path)?;
    outputs.extend([final_path, dir.join("log.csv"), dir.join("psnr.csv")]);

    let rays: usize = records.iter().map(|r| r.rays).sum::<usize>().max(1);
    let hash_after = match mode {
        GuideMode::Network => Some(param_hash(&load_occupancy(&occupancy)?.store)),
        _ => None,
    };
    let summary = GuidedSummary {
        mode: mode.name().into(),
        steps: tr.step,
        field_points_per_ray: records.iter().map(|r| r.field_points).sum::<usize>() as f64 / rays as f64,
        predicate_points_per_ray: records.iter().map(|r| r.predicate_points).sum::<usize>() as f64 / rays as f64,
        final_psnr: psnrs.last().map_or(f64::NAN, |p| p.1),
        occupancy_hash_before: hash_before,
        occupancy_hash_after: hash_after,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    outputs.push(dir.join("summary.json"));
    write_manifest(&layout, &dir, &format!("train-guided --mode {}", mode.name()), cfg, &inputs, &outputs)?;
    Ok(summary)
}

// ---------------------------------------------------------------- grid baseline

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridBaselineSummary {
    pub resolution: usize,
    pub rounds: usize,
    pub metrics: OccupancyMetrics,
    pub memory: MemoryReport,
}

/// Builds a momentum grid from a trained occupancy field with
/// `grid.offline_rounds` refreshes and scores it against the oracle.
pub fn train_grid_baseline(cfg: &ExperimentConfig, occupancy: Option<&Path>) -> Result<GridBaselineSummary> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let occupancy = occupancy.map_or_else(|| layout.occupancy_checkpoint(), Path::to_path_buf);
    require(&occupancy, "occupancy checkpoint")?;
    let occ = load_occupancy(&occupancy)?;
    let dir = layout.grid_baseline();
    create_dir(&dir)?;
    let grid = build_grid(&cfg.grid, cfg.grid.resolution, cfg.grid.offline_rounds, &occ)?;
    let path = dir.join("grid.bin");
    grid.save(&path)?;
    let oracle = cfg.scene.occupancy_grid(grid.spec);
    let summary = GridBaselineSummary {
        resolution: grid.spec.res,
        rounds: cfg.grid.offline_rounds,
        metrics: occupancy_metrics(&grid.mask(), &oracle)?,
        memory: memory_report(grid.spec.res),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    write_manifest(&layout, &dir, "train-grid-baseline", cfg, &[occupancy], &[path, dir.join("summary.json")])?;
    Ok(summary)
}

fn build_grid(base: &GridConfig, resolution: usize, rounds: usize, occ: &LoadedOccupancy) -> Result<OccGrid> {
    let gc = GridConfig { resolution, ..base.clone() };
    let mut grid = OccGrid::new(&gc, crate::geom::Aabb::unit())?;
    for _ in 0..rounds {
        grid.update(&mut |p: &[Vec3]| occupancy_density(&occ.field, &occ.store, p))?;
    }
    Ok(grid)
}

// ---------------------------------------------------------------- eval

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalOptions {
    pub occupancy: Option<PathBuf>,
    pub grid: Option<PathBuf>,
    /// Two checkpoints whose renders are compared frame by frame.
    pub compare: Option<(PathBuf, PathBuf)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthCheck {
    pub rule: String,
    pub min_opacity: f64,
    pub views: usize,
    pub metrics: OccupancyMetrics,
    /// Marked cells that are occupied or adjacent to occupied oracle cells.
    pub near_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsnrRow {
    pub method: String,
    pub psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: ExperimentConfig,
    pub resolution: usize,
    pub oracle_fraction: f64,
    pub table: Vec<TableRow>,
    pub psnr: Vec<PsnrRow>,
    pub compare: Option<Vec<f64>>,
    pub depth_check: DepthCheck,
    pub pointcloud: (usize, usize),
}

/// Writes `table.csv`, `psnr.csv`, point clouds, `depth_check.json` and
/// `report.json` into `eval/`.
pub fn eval(cfg: &ExperimentConfig, opts: &EvalOptions) -> Result<EvalReport> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let ds = load_dataset(&layout)?;
    let occ_path = opts.occupancy.clone().unwrap_or_else(|| layout.occupancy_checkpoint());
    let grid_path = opts.grid.clone().unwrap_or_else(|| layout.tracked_grid());
    require(&occ_path, "occupancy checkpoint")?;
    let occ = load_occupancy(&occ_path)?;
    let dir = layout.eval();
    create_dir(&dir)?;
    let mut inputs = dataset_inputs(&layout);
    inputs.push(occ_path.clone());

    let spec = GridSpec::new(cfg.eval.resolution, ds.manifest.aabb);
    let oracle = cfg.scene.occupancy_grid(spec);
    let net_mask = network_to_grid(&occ.field, &occ.store, spec, cfg.eval.probes, cfg.seed)?;
    let mut table = vec![TableRow {
        method: "occupancy_network".into(),
        metrics: occupancy_metrics(&net_mask, &oracle)?,
        param_number: count_parameters(&occ.field.cfg, Component::Occupancy),
    }];
    let mut grids = Vec::new();
    if grid_path.exists() {
        grids.push(("grid_tracked", grid_path.clone()));
    }
    let baseline = layout.grid_baseline().join("grid.bin");
    if baseline.exists() {
        grids.push(("grid_offline", baseline));
    }
    for (name, path) in grids {
        let g = OccGrid::load(&path)?;
        // Grids at another resolution are scored against the oracle at theirs.
        let reference = if g.spec == spec { oracle.clone() } else { cfg.scene.occupancy_grid(g.spec) };
        table.push(TableRow {
            method: format!("{name}_r{}", g.spec.res),
            metrics: occupancy_metrics(&g.mask(), &reference)?,
            param_number: g.cell_count(),
        });
        inputs.push(path);
    }
    eval::write_table_csv(&dir.join("table.csv"), &table)?;

    let mut psnr_rows = Vec::new();
    for mode in [GuideMode::Network, GuideMode::Grid, GuideMode::Dense] {
        let path = layout.radiance_checkpoint(mode);
        if !path.exists() {
            continue;
        }
        let r = load_radiance(&path)?;
        let (p, _) = with_sampler(cfg, r.mode, &occ_path, &grid_path, |s| {
            validation_psnr(&ds, &Bound { field: &r.field, store: &r.store }, s)
        })?;
        psnr_rows.push(PsnrRow { method: format!("radiance_{}", mode.name()), psnr: p });
        inputs.push(path);
    }
    let (p, _) = validation_psnr(
        &ds,
        &Bound { field: &occ.field, store: &occ.store },
        &Sampler::Dense { samples: cfg.sampler.samples_per_ray },
    )?;
    psnr_rows.push(PsnrRow { method: "occupancy_field".into(), psnr: p });
    write_csv(
        &dir.join("psnr.csv"),
        "method,psnr",
        psnr_rows.iter().map(|r| format!("{},{}", r.method, csv_value(r.psnr))),
    )?;

    let compare = match &opts.compare {
        Some((a, b)) => {
            let values = compare_checkpoints(cfg, &ds, a, b, &occ_path, &grid_path)?;
            write_csv(
                &dir.join("compare.csv"),
                "frame,psnr",
                ds.frames_in(Split::Val).iter().zip(&values).map(|(f, p)| format!("{f},{}", csv_value(*p))),
            )?;
            inputs.extend([a.clone(), b.clone()]);
            Some(values)
        }
        None => None,
    };

    let depth_check = depth_cross_check(cfg, &ds, spec, &oracle)?;
    write_json(&dir.join("depth_check.json"), &depth_check)?;

    let cloud_dir = dir.join("pointcloud");
    let pointcloud = write_pointcloud(cfg, &ds, &occ, &cloud_dir)?;

    let report = EvalReport {
        config: cfg.clone(),
        resolution: spec.res,
        oracle_fraction: oracle.occupied_fraction(),
        table,
        psnr: psnr_rows,
        compare,
        depth_check,
        pointcloud,
    };
    write_json(&dir.join("report.json"), &report)?;
    let mut outputs: Vec<PathBuf> =
        ["table.csv", "psnr.csv", "depth_check.json", "report.json"].iter().map(|f| dir.join(f)).collect();
    outputs.extend([cloud_dir.join("scene.ply"), cloud_dir.join("empty.ply")]);
    if report.compare.is_some() {
        outputs.push(dir.join("compare.csv"));
    }
    write_manifest(&layout, &dir, "eval", cfg, &inputs, &outputs)?;
    Ok(report)
}

/// Oracle renders of every dataset view splatted into a grid and scored
/// against the oracle grid.
fn depth_cross_check(cfg: &ExperimentConfig, ds: &Dataset, spec: GridSpec, oracle: &OccupancyMask) -> Result<DepthCheck> {
    let m = &ds.manifest;
    let renders: Vec<(Camera, RenderedImage)> = (0..m.frames.len())
        .map(|f| {
            let cam = ds.camera(f);
            Ok((cam, render_ground_truth(&cfg.scene, &cam, m.quadrature, m.aabb, m.background)?))
        })
        .collect::<Result<_>>()?;
    let views: Vec<(Camera, &[f64], &[f64])> =
        renders.iter().map(|(c, r)| (*c, r.depth.as_slice(), r.opacity.as_slice())).collect();
    let mask = eval::splat_depth(spec, &views)?;
    Ok(DepthCheck {
        rule: "mark the cell containing each depth point; no dilation".into(),
        min_opacity: eval::SPLAT_MIN_OPACITY,
        views: views.len(),
        metrics: occupancy_metrics(&mask, oracle)?,
        near_fraction: eval::near_fraction(&mask, oracle),
    })
}

/// A checkpoint of either kind, ready to render.
pub enum Model {
    Occupancy(LoadedOccupancy),
    Radiance(LoadedRadiance),
}

impl Model {
    pub fn load(path: &Path) -> Result<Self> {
        require(path, "checkpoint")?;
        let ckpt = Checkpoint::load(path)?;
        match checkpoint_kind(&ckpt, path)?.as_str() {
            "occupancy" => Ok(Model::Occupancy(load_occupancy(path)?)),
            "radiance" => Ok(Model::Radiance(load_radiance(path)?)),
            other => Err(Error::format("checkpoint", path, format!("unknown kind {other:?}"))),
        }
    }

    /// Occupancy fields render densely at their training sample count;
    /// radiance fields with the sampler they were trained under.
    pub fn render(
        &self,
        cfg: &ExperimentConfig,
        cameras: &[Camera],
        settings: &RenderSettings,
        occupancy: &Path,
        grid: &Path,
    ) -> Result<Vec<RenderedImage>> {
        match self {
            Model::Occupancy(o) => {
                let sampler = Sampler::Dense { samples: cfg.sampler.samples_per_ray };
                let field = Bound { field: &o.field, store: &o.store };
                cameras.iter().map(|c| render_image(c, &field, &sampler, settings)).collect()
            }
            Model::Radiance(r) => with_sampler(cfg, r.mode, occupancy, grid, |sampler| {
                let field = Bound { field: &r.field, store: &r.store };
                cameras.iter().map(|c| render_image(c, &field, sampler, settings)).collect()
            }),
        }
    }
}

/// PSNR between renders of two checkpoints on each validation frame.
fn compare_checkpoints(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    a: &Path,
    b: &Path,
    occupancy: &Path,
    grid: &Path,
) -> Result<Vec<f64>> {
    let cams: Vec<Camera> = ds.frames_in(Split::Val).into_iter().map(|f| ds.camera(f)).collect();
    let settings = render_settings(ds);
    let ra = Model::load(a)?.render(cfg, &cams, &settings, occupancy, grid)?;
    let rb = Model::load(b)?.render(cfg, &cams, &settings, occupancy, grid)?;
    Ok(ra.iter().zip(&rb).map(|(x, y)| psnr(&x.rgb, &y.rgb)).collect())
}

// ---------------------------------------------------------------- point clouds

/// Samples along the rays of a reduced-resolution view of frame 0, split by
/// routing into `scene.ply` and `empty.ply`.
fn write_pointcloud(cfg: &ExperimentConfig, ds: &Dataset, occ: &LoadedOccupancy, dir: &Path) -> Result<(usize, usize)> {
    create_dir(dir)?;
    let side = cfg.eval.cloud_image;
    let camera = Camera {
        pose: ds.manifest.frames[0].pose,
        intrinsics: Intrinsics::from_fov(side, side, ds.manifest.rig.fov_deg),
    };
    let rays: Vec<_> = generate_rays(&camera)?.iter().filter_map(|r| r.clipped(&ds.manifest.aabb)).collect();
    let batch = stratified_sample(&rays, cfg.eval.cloud_samples, None);
    let q = occ.field.query(&occ.store, &batch.positions, &batch.directions)?;
    let e = occ.field.cfg.empty_index();
    let points: Vec<CloudPoint> = (0..batch.len())
        .map(|i| CloudPoint { position: batch.positions[i], color: q.rgb[i], alpha: eval::alpha(q.sigma[i], batch.delta[i]) })
        .collect();
    let empty: Vec<bool> = q.top1.iter().map(|&k| k == e).collect();
    eval::export_split_pointcloud(dir, &points, &empty, cfg.eval.ply_mode)
}

/// Exports the routing point clouds of an occupancy checkpoint into
/// `pointcloud/` (or `out`).
pub fn export_pointcloud(cfg: &ExperimentConfig, occupancy: Option<&Path>, out: Option<&Path>) -> Result<(usize, usize)> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let ds = load_dataset(&layout)?;
    let path = occupancy.map_or_else(|| layout.occupancy_checkpoint(), Path::to_path_buf);
    require(&path, "occupancy checkpoint")?;
    let occ = load_occupancy(&path)?;
    let dir = out.map_or_else(|| layout.pointcloud(), Path::to_path_buf);
    let counts = write_pointcloud(cfg, &ds, &occ, &dir)?;
    write_manifest(
        &layout,
        &dir,
        "export-pointcloud",
        cfg,
        &[path],
        &[dir.join("scene.ply"), dir.join("empty.ply")],
    )?;
    Ok(counts)
}

// ---------------------------------------------------------------- render

/// Renders dataset frame `frame` with a checkpoint into `render/` as PNG,
/// PPM and a depth file. Returns the written paths.
pub fn render(cfg: &ExperimentConfig, checkpoint: &Path, frame: usize) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let ds = load_dataset(&layout)?;
    if frame >= ds.manifest.frames.len() {
        return Err(Error::Config(format!("frame {frame} out of range (dataset has {})", ds.manifest.frames.len())));
    }
    let model = Model::load(checkpoint)?;
    let imgs = model.render(
        cfg,
        &[ds.camera(frame)],
        &render_settings(&ds),
        &layout.occupancy_checkpoint(),
        &layout.tracked_grid(),
    )?;
    let img = &imgs[0];
    let dir = layout.render();
    create_dir(&dir)?;
    let stem = checkpoint.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
    let base = dir.join(format!("{stem}_frame_{frame:03}"));
    let paths = vec![base.with_extension("png"), base.with_extension("ppm"), base.with_extension("depth")];
    io::write_png(&paths[0], img.width, img.height, &img.rgb)?;
    io::write_ppm(&paths[1], img.width, img.height, &img.rgb)?;
    io::write_depth(&paths[2], img.width, img.height, &img.depth)?;
    write_manifest(&layout, &dir, &format!("render --frame {frame}"), cfg, &[checkpoint.to_path_buf()], &paths)?;
    Ok(paths)
}

// ---------------------------------------------------------------- bench

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: String,
    /// Grid resolution for grid-guided rows.
    pub resolution: Option<usize>,
    pub seconds_per_step: f64,
    pub field_points_per_ray: f64,
    pub predicate_points_per_ray: f64,
    /// Seconds to build the grid for grid-guided rows.
    pub build_seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryRow {
    pub estimator: String,
    /// Grid cells or network parameters.
    pub entries: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: ExperimentConfig,
    pub rays_per_step: usize,
    pub repeats: usize,
    pub grid_rounds: usize,
    pub timings: Vec<BenchRow>,
    pub memory: Vec<MemoryRow>,
}

/// Rounds used to fill each benchmark grid from the trained field.
pub const BENCH_GRID_ROUNDS: usize = 1;

/// Wall-clock per radiance-training step under dense, network-guided and
/// grid-guided sampling, plus memory of each estimator. Writes
/// `bench/bench.json` and `bench/bench.csv`. Timings vary run to run.
pub fn bench(cfg: &ExperimentConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let ds = load_dataset(&layout)?;
    let occ_path = layout.occupancy_checkpoint();
    require(&occ_path, "occupancy checkpoint")?;
    let occ = load_occupancy(&occ_path)?;
    let dir = layout.bench();
    create_dir(&dir)?;

    let mut run_cfg = cfg.clone();
    run_cfg.guided.rays_per_step = cfg.bench.rays;
    let time_steps = |sampler: &Sampler<'_>, mode: GuideMode| -> Result<(f64, f64, f64)> {
        let mut tr = RadianceTrainer::new(&run_cfg, &ds, mode)?;
        tr.step(sampler)?;
        let mut times = Vec::with_capacity(cfg.bench.repeats);
        let (mut field, mut pred, mut rays) = (0usize, 0usize, 0usize);
        for _ in 0..cfg.bench.repeats {
            let t = Instant::now();
            let rec = tr.step(sampler)?;
            times.push(t.elapsed().as_secs_f64());
            field += rec.field_points;
            pred += rec.predicate_points;
            rays += rec.rays;
        }
        times.sort_by(f64::total_cmp);
        Ok((times[times.len() / 2], field as f64 / rays as f64, pred as f64 / rays as f64))
    };
    let row = |mode: &str, resolution, (s, f, p): (f64, f64, f64), build| BenchRow {
        mode: mode.into(),
        resolution,
        seconds_per_step: s,
        field_points_per_ray: f,
        predicate_points_per_ray: p,
        build_seconds: build,
    };

    let mut timings = Vec::new();
    let dense = Sampler::Dense { samples: cfg.sampler.dense_samples };
    timings.push(row("dense", None, time_steps(&dense, GuideMode::Dense)?, None));
    let (coarse, split) = (cfg.sampler.coarse, cfg.sampler.split);
    let net_pred = |p: &[Vec3]| occ.field.predict_occupied(&occ.store, p);
    let net = Sampler::Guided { coarse, split, occupied: &net_pred };
    timings.push(row("network_guided", None, time_steps(&net, GuideMode::Network)?, None));
    let mut memory = vec![MemoryRow {
        estimator: "occupancy_network".into(),
        entries: count_parameters(&occ.field.cfg, Component::Occupancy),
        bytes: count_parameters(&occ.field.cfg, Component::Occupancy) * std::mem::size_of::<f64>(),
    }];
    for &res in &cfg.bench.resolutions {
        let t = Instant::now();
        let grid = build_grid(&cfg.grid, res, BENCH_GRID_ROUNDS, &occ)?;
        let build = t.elapsed().as_secs_f64();
        let grid_pred = |p: &[Vec3]| Ok(grid.query_batch(p));
        let sampler = Sampler::Guided { coarse, split, occupied: &grid_pred };
        timings.push(row("grid_guided", Some(res), time_steps(&sampler, GuideMode::Grid)?, Some(build)));
        let m = memory_report(res);
        memory.push(MemoryRow { estimator: format!("grid_r{res}"), entries: m.cells, bytes: m.value_bytes + m.bitfield_bytes });
    }

    let report = BenchReport {
        config: cfg.clone(),
        rays_per_step: cfg.bench.rays,
        repeats: cfg.bench.repeats,
        grid_rounds: BENCH_GRID_ROUNDS,
        timings,
        memory,
    };
    write_json(&dir.join("bench.json"), &report)?;
    let mut csv = String::from("kind,name,resolution,seconds_per_step,field_points_per_ray,predicate_points_per_ray,entries,bytes\n");
    for t in &report.timings {
        let res = t.resolution.map_or_else(String::new, |r| r.to_string());
        let _ = writeln!(
            csv,
            "timing,{},{res},{:.6e},{:.4},{:.4},,",
            t.mode, t.seconds_per_step, t.field_points_per_ray, t.predicate_points_per_ray
        );
    }
    for m in &report.memory {
        let _ = writeln!(csv, "memory,{},,,,,{},{}", m.estimator, m.entries, m.bytes);
    }
    write_text(&dir.join("bench.csv"), &csv)?;
    write_manifest(
        &layout,
        &dir,
        "bench",
        cfg,
        &[occ_path],
        &[dir.join("bench.json"), dir.join("bench.csv")],
    )?;
    Ok(report)
}
