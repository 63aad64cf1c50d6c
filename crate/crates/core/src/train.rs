//! Training steps for the occupancy field and for a plain radiance field
//! under dense, network-guided or grid-guided sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, GuideMode};
use crate::diff::{AdamConfig, Graph, ParamStore};
use crate::error::{Error, Result};
use crate::eval::OccStats;
use crate::fields::{encode_batch, OccupancyField, RadianceField};
use crate::geom::{Aabb, Vec3};
use crate::grid::OccGrid;
use crate::losses::{
    density_loss_node, final_loss_node, imbalanced_occupancy_loss_node, rendering_loss_node, RoutingStats,
};
use crate::rendering::{composite_node, generate_rays, stratified_sample, RadianceQuery, Ray, Sampler};
use crate::scene::Dataset;

/// Every box-hitting pixel ray of a set of frames with its target color.
#[derive(Clone, Debug)]
pub struct RayPool {
    pub rays: Vec<Ray>,
    pub colors: Vec<Vec3>,
}

impl RayPool {
    pub fn new(ds: &Dataset, frames: &[usize], aabb: Aabb) -> Result<Self> {
        let mut pool = Self { rays: Vec::new(), colors: Vec::new() };
        for &f in frames {
            for (ray, color) in generate_rays(&ds.camera(f))?.iter().zip(&ds.images[f]) {
                if let Some(r) = ray.clipped(&aabb) {
                    pool.rays.push(r);
                    pool.colors.push(*color);
                }
            }
        }
        if pool.rays.is_empty() {
            return Err(Error::Config("no training ray hits the scene box".into()));
        }
        Ok(pool)
    }

    /// `count` rays drawn uniformly with replacement.
    pub fn draw(&self, rng: &mut ChaCha8Rng, count: usize) -> (Vec<Ray>, Vec<Vec3>) {
        (0..count)
            .map(|_| {
                let i = rng.random_range(0..self.rays.len());
                (self.rays[i], self.colors[i])
            })
            .unzip()
    }
}

/// A field bound to its parameters, usable by the renderer.
pub struct Bound<'a, F> {
    pub field: &'a F,
    pub store: &'a ParamStore,
}

impl RadianceQuery for Bound<'_, OccupancyField> {
    fn query(&self, positions: &[Vec3], dirs: &[Vec3]) -> Result<(Vec<f64>, Vec<Vec3>)> {
        let q = self.field.query(self.store, positions, dirs)?;
        Ok((q.sigma, q.rgb))
    }
}

impl RadianceQuery for Bound<'_, RadianceField> {
    fn query(&self, positions: &[Vec3], dirs: &[Vec3]) -> Result<(Vec<f64>, Vec<Vec3>)> {
        let q = self.field.query(self.store, positions, dirs)?;
        Ok((q.sigma, q.rgb))
    }
}

/// Loss components of one occupancy-field step.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_r: f64,
    pub l_o: f64,
    /// `None` when the batch had no empty-routed or no scene-routed point.
    pub l_d: Option<f64>,
    pub l_f: f64,
    pub f_e: f64,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "step,l_r,l_o,l_d,l_f,f_e,sigma_e_over_sigma_s";

    /// `l_d` is the density ratio itself, so it fills both columns.
    pub fn csv_row(&self) -> String {
        let d = self.l_d.map_or_else(|| "NA".to_string(), |v| format!("{v:.9e}"));
        format!("{},{:.9e},{:.9e},{d},{:.9e},{:.6},{d}", self.step, self.l_r, self.l_o, self.l_f, self.f_e)
    }
}

fn check_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { what: format!("{name} = {v}") })
    }
}

/// Seed of the ray/jitter stream, kept apart from the initialization stream.
fn stream_seed(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt
}

/// Joint training of the occupancy network, scene sub-networks and empty
/// branch, optionally keeping a momentum grid in step with the field.
pub struct OccupancyTrainer {
    pub cfg: ExperimentConfig,
    pub field: OccupancyField,
    pub store: ParamStore,
    pub grid: Option<OccGrid>,
    pub step: usize,
    pool: RayPool,
    rng: ChaCha8Rng,
}

/// Outputs of one occupancy step.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyStep {
    pub losses: LossRecord,
    pub stats: OccStats,
}

impl OccupancyTrainer {
    pub fn new(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.seed);
        let field = OccupancyField::new(&mut store, &cfg.network)?;
        let pool = RayPool::new(ds, &ds.frames_in(crate::scene::Split::Train), ds.manifest.aabb)?;
        let grid = if cfg.occupancy.track_grid { Some(OccGrid::new(&cfg.grid, ds.manifest.aabb)?) } else { None };
        Ok(Self {
            cfg: cfg.clone(),
            field,
            store,
            grid,
            step: 0,
            pool,
            rng: ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 1)),
        })
    }

    pub fn background(&self) -> Vec3 {
        self.cfg.dataset.background
    }

    /// One optimizer step. On a non-finite loss or gradient the parameters
    /// are left untouched and an error is returned.
    pub fn step(&mut self) -> Result<OccupancyStep> {
        let cfg = &self.cfg;
        let (rays, target) = self.pool.draw(&mut self.rng, cfg.occupancy.rays_per_step);
        let batch = stratified_sample(&rays, cfg.sampler.samples_per_ray, Some(&mut self.rng));

        let mut g = Graph::new();
        let pos = g.constant(encode_batch(&batch.positions, cfg.network.pos_bands));
        let dir = g.constant(encode_batch(&batch.directions, cfg.network.dir_bands));
        let out = self.field.forward(&mut g, &self.store, pos, dir)?;
        let (color, comp) = composite_node(&mut g, out.sigma, out.rgb, &batch, cfg.dataset.background);
        let l_r = rendering_loss_node(&mut g, color, &target);
        let routing = RoutingStats::from_gates(g.value(out.gates), &out.top1, cfg.loss.v);
        let l_o = imbalanced_occupancy_loss_node(&mut g, out.gates, &routing);
        let sigma = g.value(out.sigma).data().to_vec();
        let empty = out.empty_mask();
        let l_d = density_loss_node(&mut g, out.gates, &sigma, &empty);
        let l_f = final_loss_node(&mut g, l_r, Some(l_o), l_d, &cfg.loss.weights());

        self.step += 1;
        let losses = LossRecord {
            step: self.step,
            l_r: g.value(l_r).item(),
            l_o: g.value(l_o).item(),
            l_d: l_d.map(|n| g.value(n).item()),
            l_f: g.value(l_f).item(),
            f_e: routing.empty_fraction(),
        };
        check_finite("l_f", losses.l_f)?;
        g.backward(l_f);
        self.store.adam_step(&g.param_grads(), &adam(cfg))?;
        let stats = OccStats::collect(self.step, &sigma, &comp.alpha, &empty);
        Ok(OccupancyStep { losses, stats })
    }

    pub fn grid_due(&self) -> bool {
        self.grid.is_some() && self.step % self.cfg.grid.update_interval == 0
    }

    /// Refreshes the tracked grid from the current field.
    pub fn update_grid(&mut self) -> Result<()> {
        let Some(grid) = self.grid.as_mut() else { return Ok(()) };
        let (field, store) = (&self.field, &self.store);
        grid.update(&mut |p: &[Vec3]| occupancy_density(field, store, p))
    }
}

/// Field density at `points`, with an arbitrary fixed view direction.
pub fn occupancy_density(field: &OccupancyField, store: &ParamStore, points: &[Vec3]) -> Result<Vec<f64>> {
    let dirs = vec![[0.0, 0.0, 1.0]; points.len()];
    Ok(field.query(store, points, &dirs)?.sigma)
}

fn adam(cfg: &ExperimentConfig) -> AdamConfig {
    cfg.optimizer
}

/// One radiance-field step's bookkeeping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadianceRecord {
    pub step: usize,
    pub l_r: f64,
    /// Points sent through the radiance field.
    pub field_points: usize,
    /// Points checked by the occupancy predicate.
    pub predicate_points: usize,
    pub rays: usize,
}

impl RadianceRecord {
    pub const CSV_HEADER: &'static str = "step,l_r,field_points,predicate_points,field_points_per_ray";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9e},{},{},{:.4}",
            self.step,
            self.l_r,
            self.field_points,
            self.predicate_points,
            self.field_points as f64 / self.rays as f64
        )
    }
}

/// Trains a fresh radiance field with a given sampler; any occupancy
/// predicate is read-only.
pub struct RadianceTrainer {
    pub cfg: ExperimentConfig,
    pub field: RadianceField,
    pub store: ParamStore,
    pub mode: GuideMode,
    pub step: usize,
    pool: RayPool,
    rng: ChaCha8Rng,
}

impl RadianceTrainer {
    pub fn new(cfg: &ExperimentConfig, ds: &Dataset, mode: GuideMode) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(stream_seed(cfg.seed, 2));
        let field = RadianceField::new(&mut store, &cfg.radiance)?;
        let pool = RayPool::new(ds, &ds.frames_in(crate::scene::Split::Train), ds.manifest.aabb)?;
        Ok(Self {
            cfg: cfg.clone(),
            field,
            store,
            mode,
            step: 0,
            pool,
            rng: ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 3)),
        })
    }

    pub fn step(&mut self, sampler: &Sampler<'_>) -> Result<RadianceRecord> {
        let cfg = &self.cfg;
        let (rays, target) = self.pool.draw(&mut self.rng, cfg.guided.rays_per_step);
        let (batch, predicate_points) = sampler.sample(&rays, Some(&mut self.rng))?;
        self.step += 1;
        if batch.is_empty() {
            // Every ray was filtered out: the prediction is pure background
            // and nothing in the field can change it.
            let bg = cfg.dataset.background;
            let l_r = crate::losses::rendering_loss(&vec![bg; rays.len()], &target);
            return Ok(RadianceRecord { step: self.step, l_r, field_points: 0, predicate_points, rays: rays.len() });
        }
        let mut g = Graph::new();
        let pos = g.constant(encode_batch(&batch.positions, cfg.radiance.pos_bands));
        let dir = g.constant(encode_batch(&batch.directions, cfg.radiance.dir_bands));
        let (sigma, rgb) = self.field.forward(&mut g, &self.store, pos, dir)?;
        let (color, _) = composite_node(&mut g, sigma, rgb, &batch, cfg.dataset.background);
        let l_r = rendering_loss_node(&mut g, color, &target);
        let value = g.value(l_r).item();
        check_finite("l_r", value)?;
        g.backward(l_r);
        self.store.adam_step(&g.param_grads(), &adam(cfg))?;
        Ok(RadianceRecord {
            step: self.step,
            l_r: value,
            field_points: batch.len(),
            predicate_points,
            rays: rays.len(),
        })
    }
}
