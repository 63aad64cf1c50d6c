use crate::diff::{CustomOp, Graph, Matrix, NodeId};
use crate::geom::Vec3;

use super::sampling::SampleBatch;

/// Per-ray colors plus the per-sample quantities behind them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Composite {
    pub colors: Vec<Vec3>,
    /// Expected termination depth `sum_i T_i alpha_i t_i` (background excluded).
    pub depth: Vec<f64>,
    /// `sum_i T_i alpha_i` per ray.
    pub opacity: Vec<f64>,
    /// `alpha_i = 1 - exp(-sigma_i delta_i)`.
    pub alpha: Vec<f64>,
    /// `T_i = exp(-sum_{j<i} sigma_j delta_j)`.
    pub transmittance: Vec<f64>,
    /// `T_i alpha_i`.
    pub weights: Vec<f64>,
}

/// Alpha compositing front to back. Whatever transmittance is left after the
/// last sample picks up `background`.
pub fn composite(batch: &SampleBatch, sigma: &[f64], rgb: &[Vec3], background: Vec3) -> Composite {
    let n = batch.len();
    assert!(sigma.len() == n && rgb.len() == n, "composite: per-sample arrays must match the batch");
    let rays = batch.ray_count();
    let mut out = Composite {
        colors: Vec::with_capacity(rays),
        depth: Vec::with_capacity(rays),
        opacity: Vec::with_capacity(rays),
        alpha: vec![0.0; n],
        transmittance: vec![0.0; n],
        weights: vec![0.0; n],
    };
    for r in 0..rays {
        let mut optical = 0.0_f64;
        let mut color = [0.0; 3];
        let mut depth = 0.0;
        let mut opacity = 0.0;
        for i in batch.ray_range(r) {
            let tau = sigma[i] * batch.delta[i];
            let t_i = (-optical).exp();
            let a = -(-tau).exp_m1();
            let w = t_i * a;
            out.transmittance[i] = t_i;
            out.alpha[i] = a;
            out.weights[i] = w;
            for c in 0..3 {
                color[c] += w * rgb[i][c];
            }
            depth += w * batch.t[i];
            opacity += w;
            optical += tau;
        }
        let rest = (-optical).exp();
        for c in 0..3 {
            color[c] += rest * background[c];
        }
        out.colors.push(color);
        out.depth.push(depth);
        out.opacity.push(opacity);
    }
    out
}

struct CompositeBackward {
    delta: Vec<f64>,
    offsets: Vec<usize>,
    transmittance: Vec<f64>,
    alpha: Vec<f64>,
    background: Vec3,
}

impl CustomOp for CompositeBackward {
    fn name(&self) -> &'static str {
        "composite"
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Vec<Option<Matrix>> {
        let rgb = inputs[1];
        let n = self.delta.len();
        let mut d_sigma = Matrix::zeros(n, 1);
        let mut d_rgb = Matrix::zeros(n, 3);
        for r in 0..self.offsets.len() - 1 {
            let range = self.offsets[r]..self.offsets[r + 1];
            let g = grad.row(r);
            let final_t = match range.clone().last() {
                Some(last) => self.transmittance[last] * (1.0 - self.alpha[last]),
                None => 1.0,
            };
            let bg_term: f64 = (0..3).map(|c| g[c] * final_t * self.background[c]).sum();
            // Running sum over later samples of w_j * <g, c_j>.
            let mut suffix = 0.0;
            for i in range.rev() {
                let w = self.transmittance[i] * self.alpha[i];
                let t_next = self.transmittance[i] * (1.0 - self.alpha[i]);
                let c = rgb.row(i);
                let gc: f64 = (0..3).map(|k| g[k] * c[k]).sum();
                d_sigma.data_mut()[i] = self.delta[i] * (t_next * gc - suffix - bg_term);
                for (k, d) in d_rgb.row_mut(i).iter_mut().enumerate() {
                    *d = w * g[k];
                }
                suffix += w * gc;
            }
        }
        vec![Some(d_sigma), Some(d_rgb)]
    }
}

/// Differentiable compositing: `sigma` is `P x 1`, `rgb` is `P x 3`, the
/// result is `rays x 3`. The forward quantities are returned alongside.
pub fn composite_node(
    g: &mut Graph,
    sigma: NodeId,
    rgb: NodeId,
    batch: &SampleBatch,
    background: Vec3,
) -> (NodeId, Composite) {
    let (sv, cv) = (g.value(sigma), g.value(rgb));
    assert_eq!(sv.shape(), (batch.len(), 1), "composite_node: sigma must be P x 1");
    assert_eq!(cv.shape(), (batch.len(), 3), "composite_node: rgb must be P x 3");
    let colors: Vec<Vec3> = (0..cv.rows()).map(|r| [cv.get(r, 0), cv.get(r, 1), cv.get(r, 2)]).collect();
    let out = composite(batch, sv.data(), &colors, background);
    let value = Matrix::from_rows(&out.colors);
    let op = CompositeBackward {
        delta: batch.delta.clone(),
        offsets: batch.ray_offsets.clone(),
        transmittance: out.transmittance.clone(),
        alpha: out.alpha.clone(),
        background,
    };
    let node = g.custom(&[sigma, rgb], value, Box::new(op));
    (node, out)
}
