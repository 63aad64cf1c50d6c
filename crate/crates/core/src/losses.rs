//! Rendering loss, load-balancing losses over the gate vector, and the
//! detached density-ratio loss.
//!
//! Each loss has a plain-value form (used by tests and reports) and a graph
//! form that feeds the optimizer.

use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Matrix, NodeId};
use crate::error::{Error, Result};
use crate::geom::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_r: f64,
    pub w_o: f64,
    pub w_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_r: 1.0, w_o: 0.0005, w_d: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w_r", self.w_r), ("w_o", self.w_o), ("w_d", self.w_d)] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!("loss weight {name} must be finite and nonnegative, got {w}")));
            }
        }
        Ok(())
    }
}

/// Dispatch fractions and mean gate values of one batch over `n + 1` branches
/// (index `n` is the empty-space branch).
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingStats {
    /// Fraction of points dispatched to each branch.
    pub f: Vec<f64>,
    /// Mean gate value of each branch over the whole batch.
    pub p: Vec<f64>,
    pub counts: Vec<usize>,
    pub n: usize,
    /// Virtual sub-network count standing in for the empty branch.
    pub v: usize,
}

impl RoutingStats {
    pub fn from_gates(gates: &Matrix, top1: &[usize], v: usize) -> Self {
        let branches = gates.cols();
        assert!(branches >= 2 && gates.rows() > 0, "routing stats need a nonempty batch and n >= 1");
        assert_eq!(top1.len(), gates.rows());
        let mut counts = vec![0; branches];
        for &k in top1 {
            counts[k] += 1;
        }
        let total = gates.rows() as f64;
        let mut p = vec![0.0; branches];
        for r in 0..gates.rows() {
            for (acc, g) in p.iter_mut().zip(gates.row(r)) {
                *acc += g;
            }
        }
        for x in &mut p {
            *x /= total;
        }
        let f = counts.iter().map(|&c| c as f64 / total).collect();
        Self { f, p, counts, n: branches - 1, v }
    }

    /// Direct construction, for tests and analysis.
    pub fn from_fractions(f: Vec<f64>, p: Vec<f64>, v: usize) -> Self {
        assert_eq!(f.len(), p.len());
        let n = f.len() - 1;
        Self { counts: Vec::new(), f, p, n, v }
    }

    pub fn empty_fraction(&self) -> f64 {
        self.f[self.n]
    }

    /// `v / (n + v)`: the empty-branch share at which the imbalanced loss is optimal.
    pub fn target_empty_fraction(&self) -> f64 {
        self.v as f64 / (self.n + self.v) as f64
    }

    /// Constant coefficients `c` with `L_o = sum_i c_i p_i`.
    fn occupancy_coefficients(&self) -> Vec<f64> {
        let scale = (self.n + self.v) as f64;
        let mut c: Vec<f64> = self.f.iter().map(|f| scale * f).collect();
        c[self.n] /= self.v as f64;
        c
    }
}

/// Mean over rays of the squared color error, summed over channels.
pub fn rendering_loss(pred: &[Vec3], target: &[Vec3]) -> f64 {
    assert_eq!(pred.len(), target.len());
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>())
        .sum();
    total / pred.len() as f64
}

pub fn rendering_loss_node(g: &mut Graph, pred: NodeId, target: &[Vec3]) -> NodeId {
    let rays = g.value(pred).rows();
    assert_eq!(rays, target.len());
    let t = g.constant(Matrix::from_rows(target));
    let diff = g.sub(pred, t);
    let sq = g.mul(diff, diff);
    let total = g.sum(sq);
    g.scale(total, 1.0 / rays as f64)
}

/// `(n + 1) * sum_i f_i p_i` over all branches; 1 at a perfectly balanced dispatch.
pub fn balanced_loss(stats: &RoutingStats) -> f64 {
    let branches = stats.f.len() as f64;
    branches * stats.f.iter().zip(&stats.p).map(|(f, p)| f * p).sum::<f64>()
}

/// Graph form of [`balanced_loss`]; `f` is held constant.
pub fn balanced_loss_node(g: &mut Graph, gates: NodeId, stats: &RoutingStats) -> NodeId {
    let branches = stats.f.len() as f64;
    let p = g.col_mean(gates);
    g.dot_const(p, stats.f.iter().map(|f| branches * f).collect())
}

/// `(n + v) * (f_e p_e / v + sum_{i<n} f_i p_i)`.
pub fn imbalanced_occupancy_loss(stats: &RoutingStats) -> f64 {
    assert!(stats.v >= 1 && stats.n >= 1);
    stats.occupancy_coefficients().iter().zip(&stats.p).map(|(c, p)| c * p).sum()
}

/// Graph form of [`imbalanced_occupancy_loss`]. `p` is the column mean of
/// `gates`; `f` is piecewise constant and carries no gradient.
pub fn imbalanced_occupancy_loss_node(g: &mut Graph, gates: NodeId, stats: &RoutingStats) -> NodeId {
    assert!(stats.v >= 1 && stats.n >= 1);
    let p = g.col_mean(gates);
    g.dot_const(p, stats.occupancy_coefficients())
}

/// Density ratio `sigma_e / sigma_s` from `(gate, sigma)` pairs of empty-routed
/// and scene-routed points. For a scene point the gate is the summed gate mass
/// of all scene sub-networks. `None` when either set is empty or `sigma_s` is 0.
pub fn density_loss(empty: &[(f64, f64)], scene: &[(f64, f64)]) -> Option<f64> {
    if empty.is_empty() || scene.is_empty() {
        return None;
    }
    let sigma_e = empty.iter().map(|(o, s)| o * s).sum::<f64>() / empty.len() as f64;
    let sigma_s = scene.iter().map(|(o, s)| o * s).sum::<f64>() / scene.len() as f64;
    (sigma_s > 0.0).then(|| sigma_e / sigma_s)
}

/// Graph form of [`density_loss`]. `sigma` is treated as a constant, so the
/// gradient only reaches the gates. Degenerate batches log a warning and
/// return `None`.
pub fn density_loss_node(g: &mut Graph, gates: NodeId, sigma: &[f64], empty_mask: &[bool]) -> Option<NodeId> {
    let (rows, cols) = g.value(gates).shape();
    assert!(sigma.len() == rows && empty_mask.len() == rows);
    let n = cols - 1;
    let n_empty = empty_mask.iter().filter(|&&e| e).count();
    let n_scene = rows - n_empty;
    if n_empty == 0 || n_scene == 0 {
        log::warn!("density loss skipped: {n_empty} empty-routed and {n_scene} scene-routed points");
        return None;
    }
    let mut w_empty = vec![0.0; rows * cols];
    let mut w_scene = vec![0.0; rows * cols];
    for i in 0..rows {
        if empty_mask[i] {
            w_empty[i * cols + n] = sigma[i] / n_empty as f64;
        } else {
            for j in 0..n {
                w_scene[i * cols + j] = sigma[i] / n_scene as f64;
            }
        }
    }
    let sigma_e = g.dot_const(gates, w_empty);
    let sigma_s = g.dot_const(gates, w_scene);
    if !(g.value(sigma_s).item() > 0.0) {
        log::warn!("density loss skipped: scene-routed mean density is zero");
        return None;
    }
    Some(g.div(sigma_e, sigma_s))
}

pub fn final_loss(l_r: f64, l_o: f64, l_d: f64, w: &LossWeights) -> f64 {
    w.w_r * l_r + w.w_o * l_o + w.w_d * l_d
}

/// Weighted sum of whichever terms are present.
pub fn final_loss_node(g: &mut Graph, l_r: NodeId, l_o: Option<NodeId>, l_d: Option<NodeId>, w: &LossWeights) -> NodeId {
    let mut total = g.scale(l_r, w.w_r);
    for (term, weight) in [(l_o, w.w_o), (l_d, w.w_d)] {
        if let Some(t) = term {
            let s = g.scale(t, weight);
            total = g.add(total, s);
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn rendering_loss_examples() {
        let c = vec![[0.2, 0.4, 0.6], [0.1, 0.0, 1.0]];
        assert_eq!(rendering_loss(&c, &c), 0.0);
        let shifted: Vec<Vec3> = c.iter().map(|p| p.map(|v| v + 0.1)).collect();
        assert!(close(rendering_loss(&shifted, &c), 0.03));

        let mut g = Graph::new();
        let pred = g.constant(Matrix::from_rows(&shifted));
        let l = rendering_loss_node(&mut g, pred, &c);
        assert!(close(g.value(l).item(), 0.03));
    }

    #[test]
    fn balanced_loss_examples() {
        let u = RoutingStats::from_fractions(vec![1.0 / 3.0; 3], vec![1.0 / 3.0; 3], 1);
        assert!(close(balanced_loss(&u), 1.0));
        let one_hot = RoutingStats::from_fractions(vec![0.0, 1.0, 0.0], vec![0.0, 1.0, 0.0], 1);
        assert!(close(balanced_loss(&one_hot), 3.0));
    }

    #[test]
    fn imbalanced_loss_examples() {
        let s = RoutingStats::from_fractions(vec![0.25, 0.25, 0.5], vec![0.25, 0.25, 0.5], 2);
        assert!(close(imbalanced_occupancy_loss(&s), 1.0));
        let all_empty = RoutingStats::from_fractions(vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 1.0], 2);
        assert!(close(imbalanced_occupancy_loss(&all_empty), 2.0));
        let (n, v) = (8, 80);
        let mut f = vec![1.0 / (n + v) as f64; n];
        f.push(v as f64 / (n + v) as f64);
        let opt = RoutingStats::from_fractions(f.clone(), f, v);
        assert!(close(imbalanced_occupancy_loss(&opt), 1.0));
        assert!(close(opt.target_empty_fraction(), 80.0 / 88.0));
    }

    #[test]
    fn stats_from_gates() {
        let gates = Matrix::from_rows(&[[0.2, 0.3, 0.5], [0.6, 0.3, 0.1], [0.1, 0.1, 0.8], [0.3, 0.4, 0.3]]);
        let s = RoutingStats::from_gates(&gates, &[2, 0, 2, 1], 8);
        assert_eq!(s.counts, vec![1, 1, 2]);
        assert!(close(s.f.iter().sum(), 1.0));
        assert!(close(s.p.iter().sum(), 1.0));
        assert!(close(s.p[2], 0.425));
        assert!(close(s.empty_fraction(), 0.5));
        assert!(close(s.target_empty_fraction(), 0.8));

        let mut g = Graph::new();
        let gn = g.constant(gates.clone());
        let l = imbalanced_occupancy_loss_node(&mut g, gn, &s);
        assert!(close(g.value(l).item(), imbalanced_occupancy_loss(&s)));
        let b = balanced_loss_node(&mut g, gn, &s);
        assert!(close(g.value(b).item(), balanced_loss(&s)));
    }

    #[test]
    fn density_loss_examples() {
        let l = density_loss(&[(0.9, 0.1), (0.8, 0.1)], &[(0.7, 10.0)]).unwrap();
        assert!((l - 0.085 / 7.0).abs() < 1e-15);
        assert!((l - 0.012143).abs() < 1e-6);
        assert!(close(density_loss(&[(0.5, 2.0)], &[(0.5, 2.0), (0.5, 2.0)]).unwrap(), 1.0));
        assert!(density_loss(&[], &[(0.5, 1.0)]).is_none());
        assert!(density_loss(&[(0.5, 1.0)], &[(0.5, 0.0)]).is_none());
    }

    #[test]
    fn density_loss_node_matches_values_and_ignores_sigma() {
        // n = 1: column 0 is the scene sub-network, column 1 the empty branch.
        let gates = Matrix::from_rows(&[[0.1, 0.9], [0.2, 0.8], [0.7, 0.3]]);
        let sigma = [0.1, 0.1, 10.0];
        let mask = [true, true, false];
        let mut g = Graph::new();
        let gn = g.constant(gates);
        let s = g.constant(Matrix::column(sigma.to_vec()));
        let detached = g.value(s).data().to_vec();
        let l = density_loss_node(&mut g, gn, &detached, &mask).unwrap();
        assert!((g.value(l).item() - 0.085 / 7.0).abs() < 1e-15);
        g.backward(l);
        assert!(g.grad(s).is_none());
        assert!(g.grad(gn).is_some());

        let mut g = Graph::new();
        let gn = g.constant(Matrix::from_rows(&[[0.5, 0.5]]));
        assert!(density_loss_node(&mut g, gn, &[1.0], &[true]).is_none());
    }

    #[test]
    fn final_loss_examples() {
        let w = LossWeights::default();
        assert_eq!((w.w_r, w.w_o, w.w_d), (1.0, 0.0005, 0.1));
        assert!(close(final_loss(2.0, 1.0, 0.5, &w), 2.0505));
        let only_r = LossWeights { w_r: 1.0, w_o: 0.0, w_d: 0.0 };
        assert_eq!(final_loss(0.7, 3.0, 9.0, &only_r), 0.7);

        let mut g = Graph::new();
        let (a, b, c) = (g.constant(Matrix::scalar(2.0)), g.constant(Matrix::scalar(1.0)), g.constant(Matrix::scalar(0.5)));
        let f = final_loss_node(&mut g, a, Some(b), Some(c), &w);
        assert!(close(g.value(f).item(), 2.0505));
        assert!(LossWeights { w_o: f64::NAN, ..w }.validate().is_err());
    }
}
