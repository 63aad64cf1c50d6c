use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Param {
    name: String,
    value: Matrix,
    first_moment: Matrix,
    second_moment: Matrix,
    /// Adam steps this parameter has taken; parameters without a gradient in a
    /// step are skipped and their bias correction does not advance.
    steps: u64,
}

/// Named parameter tensors with their Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
    step: u64,
    rng: ChaCha8Rng,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Parameter gradients keyed by id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grads {
    entries: BTreeMap<ParamId, Matrix>,
}

impl Grads {
    pub fn insert(&mut self, id: ParamId, g: Matrix) {
        match self.entries.get_mut(&id) {
            Some(existing) => existing.add_assign(&g),
            None => {
                self.entries.insert(id, g);
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.entries.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Drops every gradient whose parameter is not in `keep`.
    pub fn retain(&mut self, keep: impl Fn(ParamId) -> bool) {
        self.entries.retain(|k, _| keep(*k));
    }

    /// Sums gradients of disjoint sub-batches in ascending id order.
    pub fn merge(&mut self, other: Grads) {
        for (id, g) in other.entries {
            self.insert(id, g);
        }
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { params: Vec::new(), by_name: BTreeMap::new(), step: 0, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn add(&mut self, name: &str, value: Matrix) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.params.len());
        let (r, c) = value.shape();
        self.params.push(Param {
            name: name.to_string(),
            value,
            first_moment: Matrix::zeros(r, c),
            second_moment: Matrix::zeros(r, c),
            steps: 0,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Uniform fan-in initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn add_uniform(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.add(name, Matrix::from_vec(rows, cols, data))
    }

    pub fn add_constant(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> Result<ParamId> {
        self.add(name, Matrix::filled(rows, cols, value))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total scalar count of parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params.iter().filter(|p| p.name.starts_with(prefix)).map(|p| p.value.len()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// One Adam update with bias correction. Any non-finite gradient aborts the
    /// whole step before a parameter is touched.
    pub fn adam_step(&mut self, grads: &Grads, cfg: &AdamConfig) -> Result<()> {
        for (id, g) in grads.iter() {
            let p = &self.params[id.0];
            if g.shape() != p.value.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    expected: format!("{:?}", p.value.shape()),
                    got: format!("{:?} for {}", g.shape(), p.name),
                });
            }
            if !g.all_finite() {
                let bad = g.data().iter().filter(|v| !v.is_finite()).count();
                return Err(Error::NonFinite { what: format!("gradient of {} ({bad} entries)", p.name) });
            }
        }
        self.step += 1;
        for (id, g) in grads.iter() {
            let p = &mut self.params[id.0];
            p.steps += 1;
            let t = p.steps as i32;
            let c1 = 1.0 - cfg.beta1.powi(t);
            let c2 = 1.0 - cfg.beta2.powi(t);
            let m = p.first_moment.data_mut();
            let v = p.second_moment.data_mut();
            let theta = p.value.data_mut();
            for i in 0..theta.len() {
                let gi = g.data()[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                theta[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            step: self.step,
            meta,
            params: self
                .params
                .iter()
                .map(|p| CheckpointParam {
                    name: p.name.clone(),
                    shape: [p.value.rows(), p.value.cols()],
                    value: p.value.data().to_vec(),
                    first_moment: p.first_moment.data().to_vec(),
                    second_moment: p.second_moment.data().to_vec(),
                    steps: p.steps,
                })
                .collect(),
        }
    }

    /// Overwrites values and moments of same-named parameters from a checkpoint.
    /// Every parameter of this store must be present with a matching shape.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let by_name: BTreeMap<&str, &CheckpointParam> = ckpt.params.iter().map(|p| (p.name.as_str(), p)).collect();
        for p in &mut self.params {
            let src = by_name
                .get(p.name.as_str())
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {:?}", p.name)))?;
            let [r, c] = src.shape;
            if (r, c) != p.value.shape() || src.value.len() != r * c {
                return Err(Error::Shape {
                    op: "load_checkpoint",
                    expected: format!("{:?}", p.value.shape()),
                    got: format!("{:?} for {}", (r, c), p.name),
                });
            }
            p.value = Matrix::from_vec(r, c, src.value.clone());
            p.first_moment = Matrix::from_vec(r, c, src.first_moment.clone());
            p.second_moment = Matrix::from_vec(r, c, src.second_moment.clone());
            p.steps = src.steps;
        }
        self.step = ckpt.step;
        Ok(())
    }
}

pub const CHECKPOINT_FORMAT: &str = "occlab-params";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointParam {
    pub name: String,
    pub shape: [usize; 2],
    pub value: Vec<f64>,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub steps: u64,
}

/// Versioned JSON container of parameters, optimizer moments and step counter.
/// Floats are written in shortest round-trip form, so values reload bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub step: u64,
    pub meta: serde_json::Value,
    pub params: Vec<CheckpointParam>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint =
            serde_json::from_slice(&bytes).map_err(|e| Error::format("checkpoint", path, e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::format("checkpoint", path, format!("unknown format {:?}", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::format("checkpoint", path, format!("unsupported version {}", ckpt.version)));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut store = ParamStore::new(1);
        let id = store.add_uniform("w", 2, 3, 3).unwrap();
        let before = store.value(id).clone();
        let mut grads = Grads::default();
        grads.insert(id, Matrix::zeros(2, 3));
        store.adam_step(&grads, &AdamConfig::default()).unwrap();
        assert_eq!(store.value(id), &before);
        assert_eq!(store.step(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new(1);
        let id = store.add_constant("theta", 1, 1, 0.0).unwrap();
        let mut grads = Grads::default();
        grads.insert(id, Matrix::scalar(1.0));
        let cfg = AdamConfig::default();
        store.adam_step(&grads, &cfg).unwrap();
        // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps).
        let moved = -store.value(id).item();
        assert!((moved - cfg.lr / (1.0 + cfg.eps)).abs() < 1e-18);
    }

    #[test]
    fn non_finite_gradient_aborts_step() {
        let mut store = ParamStore::new(1);
        let a = store.add_constant("a", 1, 1, 1.0).unwrap();
        let b = store.add_constant("b", 1, 1, 1.0).unwrap();
        let mut grads = Grads::default();
        grads.insert(a, Matrix::scalar(1.0));
        grads.insert(b, Matrix::scalar(f64::NAN));
        let err = store.adam_step(&grads, &AdamConfig::default()).unwrap_err();
        assert!(err.is_numerical());
        assert!(err.to_string().contains('b'));
        assert_eq!(store.value(a).item(), 1.0);
        assert_eq!(store.step(), 0);
    }

    #[test]
    fn seeded_runs_are_bitwise_identical() {
        let run = || {
            let mut store = ParamStore::new(42);
            let id = store.add_uniform("w", 4, 4, 4).unwrap();
            for k in 0..10 {
                let mut grads = Grads::default();
                let g = store.value(id).map(|v| v * v - 0.1 * k as f64);
                grads.insert(id, g);
                store.adam_step(&grads, &AdamConfig::default()).unwrap();
            }
            store
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn moments_start_at_zero_and_duplicates_rejected() {
        let mut store = ParamStore::new(0);
        store.add_uniform("w", 3, 2, 3).unwrap();
        let ck = store.to_checkpoint(serde_json::Value::Null);
        assert!(ck.params[0].first_moment.iter().all(|v| *v == 0.0));
        assert!(ck.params[0].second_moment.iter().all(|v| *v == 0.0));
        assert!(store.add_uniform("w", 1, 1, 1).is_err());
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let mut store = ParamStore::new(9);
        let id = store.add_uniform("layer.w", 5, 7, 5).unwrap();
        store.add_uniform("layer.b", 1, 7, 5).unwrap();
        let mut grads = Grads::default();
        grads.insert(id, store.value(id).map(|v| v.sin() * 1e-3 + 1e-300));
        store.adam_step(&grads, &AdamConfig::default()).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        store.to_checkpoint(serde_json::json!({"note": "x"})).save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let mut fresh = ParamStore::new(123);
        fresh.add_uniform("layer.w", 5, 7, 5).unwrap();
        fresh.add_uniform("layer.b", 1, 7, 5).unwrap();
        fresh.load_checkpoint(&loaded).unwrap();
        for pid in store.ids() {
            let (a, b) = (store.value(pid).data(), fresh.value(pid).data());
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(fresh.step(), 1);
        assert_eq!(fresh.to_checkpoint(serde_json::json!({"note": "x"})), loaded);
    }
}
