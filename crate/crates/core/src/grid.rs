//! Momentum occupancy grid: per-cell density estimates refreshed by sampling
//! the field, decayed between refreshes, and thresholded into a binary mask.

use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Aabb, GridSpec, OccupancyMask, Vec3};
use crate::rendering::{guided_sample, GuidedBatch, Ray};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub resolution: usize,
    pub decay: f64,
    pub threshold: f64,
    /// Training steps between refreshes.
    pub update_interval: usize,
    /// Densities are multiplied by this before entering the momentum, so the
    /// threshold applies to `sigma * step` rather than to raw density.
    pub value_scale: f64,
    pub seed: u64,
    /// Refresh rounds used when a grid is built from an already trained field.
    pub offline_rounds: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            decay: 0.95,
            threshold: 0.01,
            update_interval: 16,
            value_scale: default_value_scale(),
            seed: 0,
            offline_rounds: 32,
        }
    }
}

/// Length of one coarse ray step across the unit box diagonal at 128 samples.
pub fn default_value_scale() -> f64 {
    Aabb::unit().diagonal() / 128.0
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.update_interval == 0 {
            return Err(Error::Config("grid resolution and update interval must be positive".into()));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::Config(format!("grid decay must be in (0, 1), got {}", self.decay)));
        }
        if !(self.threshold > 0.0 && self.value_scale > 0.0 && self.threshold.is_finite() && self.value_scale.is_finite())
        {
            return Err(Error::Config("grid threshold and value scale must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OccGrid {
    pub spec: GridSpec,
    pub decay: f64,
    pub threshold: f64,
    pub value_scale: f64,
    pub values: Vec<f64>,
    pub occupied: Vec<bool>,
    pub updates: u64,
    seed: u64,
}

/// Cell count and storage of a dense grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub resolution: usize,
    pub cells: usize,
    pub value_bytes: usize,
    pub bitfield_bytes: usize,
}

pub fn memory_report(resolution: usize) -> MemoryReport {
    assert!(resolution >= 1);
    let cells = resolution.pow(3);
    MemoryReport {
        resolution,
        cells,
        value_bytes: cells * std::mem::size_of::<f64>(),
        bitfield_bytes: cells.div_ceil(8),
    }
}

/// Momentum rule for one cell.
pub fn momentum(value: f64, decay: f64, sample: f64) -> f64 {
    (decay * value).max(sample)
}

impl OccGrid {
    pub fn new(cfg: &GridConfig, aabb: Aabb) -> Result<Self> {
        cfg.validate()?;
        let spec = GridSpec::new(cfg.resolution, aabb);
        let n = spec.cell_count();
        Ok(Self {
            spec,
            decay: cfg.decay,
            threshold: cfg.threshold,
            value_scale: cfg.value_scale,
            values: vec![0.0; n],
            occupied: vec![false; n],
            updates: 0,
            seed: cfg.seed,
        })
    }

    pub fn cell_count(&self) -> usize {
        self.values.len()
    }

    /// One jittered probe per cell. The jitter depends only on the seed and
    /// the update count.
    pub fn probe_points(&self) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.updates);
        (0..self.cell_count())
            .map(|i| {
                let u: Vec3 = std::array::from_fn(|_| rng.random::<f64>());
                self.spec.point_in_cell(i, u)
            })
            .collect()
    }

    /// Applies the momentum rule with one density sample per cell, then
    /// rebinarizes.
    pub fn apply(&mut self, sigma: &[f64]) {
        assert_eq!(sigma.len(), self.cell_count());
        for (v, s) in self.values.iter_mut().zip(sigma) {
            *v = momentum(*v, self.decay, s.max(0.0) * self.value_scale);
        }
        self.updates += 1;
        self.binarize();
    }

    /// Probes every cell with `density` and applies the update.
    pub fn update(&mut self, density: &mut dyn FnMut(&[Vec3]) -> Result<Vec<f64>>) -> Result<()> {
        let points = self.probe_points();
        let sigma = density(&points)?;
        if sigma.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite { what: "grid probe density".into() });
        }
        self.apply(&sigma);
        Ok(())
    }

    pub fn binarize(&mut self) {
        for (o, v) in self.occupied.iter_mut().zip(&self.values) {
            *o = *v > self.threshold;
        }
    }

    /// Outside the box counts as unoccupied.
    pub fn query(&self, p: Vec3) -> bool {
        self.spec.locate(p).is_some_and(|i| self.occupied[i])
    }

    pub fn query_batch(&self, points: &[Vec3]) -> Vec<bool> {
        points.iter().map(|p| self.query(*p)).collect()
    }

    pub fn mask(&self) -> OccupancyMask {
        OccupancyMask { spec: self.spec, cells: self.occupied.clone() }
    }

    /// Same pipeline as network-guided sampling with the grid as predicate.
    pub fn guided_sample(&self, rays: &[Ray], coarse: usize, split: usize) -> Result<GuidedBatch> {
        guided_sample(rays, coarse, split, None, &mut |p: &[Vec3]| Ok(self.query_batch(p)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(96 + 8 * self.values.len());
        bytes.extend_from_slice(SNAPSHOT_MAGIC);
        bytes.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(self.spec.res as u32).to_le_bytes());
        for v in self.spec.aabb.min.iter().chain(&self.spec.aabb.max) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for v in [self.decay, self.threshold, self.value_scale] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&self.updates.to_le_bytes());
        bytes.extend_from_slice(&self.seed.to_le_bytes());
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::format("grid snapshot", path, m.to_string());
        if bytes.len() < SNAPSHOT_HEADER || &bytes[..4] != SNAPSHOT_MAGIC {
            return Err(bad("missing header"));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let u64_at = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
        let f64_at = |i: usize| f64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
        if u32_at(4) != SNAPSHOT_VERSION {
            return Err(bad("unsupported version"));
        }
        let res = u32_at(8) as usize;
        let b: Vec<f64> = (0..6).map(|k| f64_at(12 + 8 * k)).collect();
        let aabb = Aabb { min: [b[0], b[1], b[2]], max: [b[3], b[4], b[5]] };
        let (decay, threshold, value_scale) = (f64_at(60), f64_at(68), f64_at(76));
        let (updates, seed) = (u64_at(84), u64_at(92));
        if res == 0 || bytes.len() != SNAPSHOT_HEADER + 8 * res.pow(3) {
            return Err(bad("payload length does not match resolution"));
        }
        let values: Vec<f64> = bytes[SNAPSHOT_HEADER..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let mut grid = Self {
            spec: GridSpec::new(res, aabb),
            decay,
            threshold,
            value_scale,
            occupied: vec![false; values.len()],
            values,
            updates,
            seed,
        };
        grid.binarize();
        Ok(grid)
    }
}

const SNAPSHOT_MAGIC: &[u8; 4] = b"OGRD";
const SNAPSHOT_VERSION: u32 = 1;
const SNAPSHOT_HEADER: usize = 100;

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(res: usize) -> OccGrid {
        OccGrid::new(&GridConfig { resolution: res, value_scale: 1.0, ..Default::default() }, Aabb::unit()).unwrap()
    }

    #[test]
    fn momentum_examples() {
        assert!((momentum(0.5, 0.95, 0.2) - 0.475).abs() < 1e-15);
        assert_eq!(momentum(0.5, 0.95, 0.9), 0.9);
    }

    #[test]
    fn momentum_is_monotone_in_sample() {
        for v in [0.0, 0.3, 2.0] {
            let mut prev = momentum(v, 0.95, 0.0);
            for k in 1..100 {
                let next = momentum(v, 0.95, k as f64 * 0.05);
                assert!(next >= prev);
                prev = next;
            }
        }
    }

    #[test]
    fn zero_field_empties_grid_on_schedule() {
        let mut g = grid(4);
        let v0 = 2.0;
        g.values.fill(v0);
        g.binarize();
        assert!(g.occupied.iter().all(|&o| o));
        let needed = ((g.threshold / v0).ln() / g.decay.ln()).ceil() as usize;
        for k in 1..=needed {
            g.update(&mut |p: &[Vec3]| Ok(vec![0.0; p.len()])).unwrap();
            let any = g.occupied.iter().any(|&o| o);
            assert_eq!(any, k < needed, "after {k} of {needed} updates");
        }
    }

    #[test]
    fn constant_field_above_threshold_stays_occupied() {
        let mut g = grid(4);
        for _ in 0..200 {
            g.update(&mut |p: &[Vec3]| Ok(vec![0.02; p.len()])).unwrap();
        }
        assert!(g.occupied.iter().all(|&o| o));
        assert!(g.values.iter().all(|&v| (v - 0.02).abs() < 1e-15));
    }

    #[test]
    fn query_matches_brute_force_at_16() {
        let mut g = grid(16);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sigma: Vec<f64> = (0..g.cell_count()).map(|_| rng.random::<f64>() * 0.02).collect();
        g.apply(&sigma);
        for i in 0..g.cell_count() {
            let expected = g.values[i] > g.threshold;
            assert_eq!(g.query(g.spec.cell_center(i)), expected);
            assert_eq!(g.query(g.spec.point_in_cell(i, [0.01, 0.99, 0.5])), expected);
        }
        assert!(!g.query([1.5, 0.0, 0.0]));
    }

    #[test]
    fn probes_stay_inside_their_cells() {
        let g = grid(8);
        for (i, p) in g.probe_points().iter().enumerate() {
            assert_eq!(g.spec.locate(*p), Some(i));
        }
    }

    #[test]
    fn memory_report_counts() {
        assert_eq!(memory_report(1).cells, 1);
        assert_eq!(memory_report(128).cells, 2_097_152);
        assert_eq!(memory_report(512).cells, 134_217_728);
        assert_eq!(memory_report(2).bitfield_bytes, 1);
    }

    fn rays() -> Vec<Ray> {
        (0..16)
            .filter_map(|i| {
                let x = -0.9 + 0.12 * i as f64;
                let r = Ray { origin: [x, 0.1, 3.0], direction: [0.0, 0.0, -1.0], t_near: 0.0, t_far: f64::INFINITY };
                r.clipped(&Aabb::unit())
            })
            .collect()
    }

    #[test]
    fn full_and_empty_grids() {
        let mut g = grid(8);
        g.values.fill(1.0);
        g.binarize();
        let full = g.guided_sample(&rays(), 32, 8).unwrap();
        let plain = guided_sample(&rays(), 32, 8, None, &mut |p: &[Vec3]| Ok(vec![true; p.len()])).unwrap();
        assert_eq!(full, plain);

        g.values.fill(0.0);
        g.binarize();
        let empty = g.guided_sample(&rays(), 32, 8).unwrap();
        assert!(empty.batch.is_empty());
        assert_eq!(empty.batch.ray_count(), rays().len());
    }

    #[test]
    fn kept_coarse_samples_lie_in_occupied_cells() {
        let mut g = grid(8);
        // Cell-aligned box [-0.5, 0.5]^3.
        for i in 0..g.cell_count() {
            let c = g.spec.cell_center(i);
            g.values[i] = if c.iter().all(|v| v.abs() < 0.5) { 1.0 } else { 0.0 };
        }
        g.binarize();
        let mut kept = Vec::new();
        guided_sample(&rays(), 64, 8, None, &mut |p: &[Vec3]| {
            let q = g.query_batch(p);
            kept.extend(p.iter().zip(&q).filter(|(_, k)| **k).map(|(p, _)| *p));
            Ok(q)
        })
        .unwrap();
        assert!(!kept.is_empty());
        assert!(kept.iter().all(|p| p.iter().all(|v| v.abs() <= 0.5)));
    }

    #[test]
    fn snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = grid(4);
        g.apply(&(0..64).map(|i| i as f64 * 1e-3).collect::<Vec<_>>());
        let p = dir.path().join("grid.bin");
        g.save(&p).unwrap();
        assert_eq!(OccGrid::load(&p).unwrap(), g);
        std::fs::write(&p, b"OGRD").unwrap();
        assert!(OccGrid::load(&p).is_err());
    }
}
