use std::collections::BTreeMap;

use super::matrix::{gemm, Matrix};
use super::params::{Grads, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

/// Backward rule for an operation defined outside this module.
///
/// `backward` receives the forward inputs, the forward output and the
/// gradient flowing into the output, and returns one optional gradient per
/// input (in input order).
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Matrix], output: &Matrix, grad: &Matrix) -> Vec<Option<Matrix>>;
}

enum Op {
    Leaf,
    Linear { x: NodeId, w: NodeId, b: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, shift: NodeId, xhat: Matrix, inv_std: Vec<f64> },
    Softmax(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    ScaleRows { x: NodeId, s: NodeId },
    Sum(NodeId),
    Mean(NodeId),
    ColMean(NodeId),
    RowSum(NodeId),
    DotConst { x: NodeId, weights: Vec<f64> },
    GatherRows { x: NodeId, idx: Vec<usize> },
    ScatterRows { parts: Vec<(NodeId, Vec<usize>)> },
    PickCols { x: NodeId, cols: Vec<usize> },
    SliceCols { x: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    Custom { inputs: Vec<NodeId>, op: Box<dyn CustomOp> },
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so creation
/// order is a topological order and backward is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    values: Vec<Matrix>,
    ops: Vec<Op>,
    grads: Vec<Option<Matrix>>,
    params: BTreeMap<ParamId, NodeId>,
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.values.push(value);
        self.ops.push(op);
        NodeId(self.values.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.values[id.0]
    }

    /// Gradient accumulated by the last [`Graph::backward`] call, if the node
    /// was reached.
    pub fn grad(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Binds a trainable parameter. Repeated calls return the same node, so a
    /// parameter shared by several sub-graphs accumulates all contributions.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&node) = self.params.get(&id) {
            return node;
        }
        let node = self.push(store.value(id).clone(), Op::Leaf);
        self.params.insert(id, node);
        node
    }

    /// Copies the value into a new leaf; nothing flows back to `x`.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.values[x.0].clone();
        self.push(v, Op::Leaf)
    }

    /// `x * w + b` with `x: B x in`, `w: in x out`, `b: 1 x out`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if xs.1 != ws.0 || bs != (1, ws.1) {
            return Err(Error::Shape {
                op: "linear",
                expected: format!("input cols {} and bias 1x{}", ws.0, ws.1),
                got: format!("input {}x{}, bias {}x{}", xs.0, xs.1, bs.0, bs.1),
            });
        }
        let mut out = Matrix::zeros(xs.0, ws.1);
        let bias = self.value(b).data();
        for r in 0..xs.0 {
            out.row_mut(r).copy_from_slice(bias);
        }
        gemm(1.0, self.value(x), false, self.value(w), false, 1.0, &mut out);
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    /// Per-row normalization to zero mean and unit variance, then `gain * xhat + shift`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, shift: NodeId, eps: f64) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        assert!(cols >= 2, "layer_norm needs at least two channels");
        assert_eq!(self.value(gain).shape(), (1, cols));
        assert_eq!(self.value(shift).shape(), (1, cols));
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let g = self.value(gain).data();
        let s = self.value(shift).data();
        let mut out = xhat.clone();
        for r in 0..rows {
            for ((o, gi), si) in out.row_mut(r).iter_mut().zip(g).zip(s) {
                *o = *o * gi + si;
            }
        }
        self.push(out, Op::LayerNorm { x, gain, shift, xhat, inv_std })
    }

    /// Row-wise softmax, stabilized by subtracting the row maximum.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.push(out, Op::Softmax(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(softplus);
        self.push(out, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x))
    }

    fn zip_with(&self, a: NodeId, b: NodeId, op: &str, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "{op}: operand shapes differ");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Matrix::from_vec(av.rows(), av.cols(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.zip_with(a, b, "add", |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.zip_with(a, b, "sub", |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.zip_with(a, b, "mul", |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.zip_with(a, b, "div", |x, y| x / y);
        self.push(out, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    /// Multiplies row `r` of `x` by `s[r]`, where `s` is a column.
    pub fn scale_rows(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let (xv, sv) = (self.value(x), self.value(s));
        assert_eq!(sv.shape(), (xv.rows(), 1), "scale_rows: scale must be a column");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let f = sv.data()[r];
            for v in out.row_mut(r) {
                *v *= f;
            }
        }
        self.push(out, Op::ScaleRows { x, s })
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let out = Matrix::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        assert!(!xv.is_empty(), "mean of empty matrix");
        let out = Matrix::scalar(xv.sum() / xv.len() as f64);
        self.push(out, Op::Mean(x))
    }

    /// Column means, `B x C -> 1 x C`.
    pub fn col_mean(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        assert!(xv.rows() > 0, "col_mean of empty matrix");
        let mut out = Matrix::zeros(1, xv.cols());
        for r in 0..xv.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        let n = xv.rows() as f64;
        for o in out.data_mut() {
            *o /= n;
        }
        self.push(out, Op::ColMean(x))
    }

    /// Row sums, `B x C -> B x 1`.
    pub fn row_sum(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let out = Matrix::column((0..xv.rows()).map(|r| xv.row(r).iter().sum()).collect());
        self.push(out, Op::RowSum(x))
    }

    /// Scalar `sum_i x_i * weights_i` against constant weights of the same length.
    pub fn dot_const(&mut self, x: NodeId, weights: Vec<f64>) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.len(), weights.len(), "dot_const: length mismatch");
        let out = Matrix::scalar(xv.data().iter().zip(&weights).map(|(a, b)| a * b).sum());
        self.push(out, Op::DotConst { x, weights })
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> NodeId {
        let xv = self.value(x);
        let mut out = Matrix::zeros(idx.len(), xv.cols());
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(xv.row(i));
        }
        self.push(out, Op::GatherRows { x, idx: idx.to_vec() })
    }

    /// Inverse of a partition into gathered parts: row `j` of part `p` lands at
    /// row `parts[p].1[j]` of a `total`-row output. Every output row must be
    /// covered exactly once.
    pub fn scatter_rows(&mut self, parts: Vec<(NodeId, Vec<usize>)>, total: usize, cols: usize) -> NodeId {
        let mut out = Matrix::zeros(total, cols);
        let mut covered = vec![false; total];
        for (node, idx) in &parts {
            let pv = self.value(*node);
            assert_eq!(pv.shape(), (idx.len(), cols), "scatter_rows: part shape mismatch");
            for (j, &i) in idx.iter().enumerate() {
                assert!(!covered[i], "scatter_rows: row {i} covered twice");
                covered[i] = true;
                out.row_mut(i).copy_from_slice(pv.row(j));
            }
        }
        assert!(covered.iter().all(|&c| c), "scatter_rows: rows left uncovered");
        self.push(out, Op::ScatterRows { parts })
    }

    /// Picks `x[r, cols[r]]` for each row, giving a column.
    pub fn pick_cols(&mut self, x: NodeId, cols: &[usize]) -> NodeId {
        let xv = self.value(x);
        assert_eq!(cols.len(), xv.rows());
        let out = Matrix::column(cols.iter().enumerate().map(|(r, &c)| xv.get(r, c)).collect());
        self.push(out, Op::PickCols { x, cols: cols.to_vec() })
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let xv = self.value(x);
        assert!(start < end && end <= xv.cols(), "slice_cols: bad range");
        let mut out = Matrix::zeros(xv.rows(), end - start);
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..end]);
        }
        self.push(out, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let rows = self.value(xs[0]).rows();
        let cols: usize = xs.iter().map(|&x| self.value(x).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for &x in xs {
                let xv = self.value(x);
                assert_eq!(xv.rows(), rows, "concat_cols: row mismatch");
                out.row_mut(r)[c0..c0 + xv.cols()].copy_from_slice(xv.row(r));
                c0 += xv.cols();
            }
        }
        self.push(out, Op::ConcatCols(xs.to_vec()))
    }

    /// Records an externally computed value whose backward rule is `op`.
    pub fn custom(&mut self, inputs: &[NodeId], value: Matrix, op: Box<dyn CustomOp>) -> NodeId {
        self.push(value, Op::Custom { inputs: inputs.to_vec(), op })
    }

    /// Reverse sweep from a scalar root. Gradients from previous sweeps are discarded.
    pub fn backward(&mut self, root: NodeId) {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be a scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.values.len()];
        grads[root.0] = Some(Matrix::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
    }

    fn backward_node(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let vals = &self.values;
        let out = &vals[i];
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (&vals[x.0], &vals[w.0]);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                gemm(1.0, g, false, wv, true, 0.0, &mut dx);
                let mut dw = Matrix::zeros(wv.rows(), wv.cols());
                gemm(1.0, xv, true, g, false, 0.0, &mut dw);
                let mut db = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *w, dw);
                accumulate(grads, *b, db);
            }
            Op::LayerNorm { x, gain, shift, xhat, inv_std } => {
                let gv = vals[gain.0].data();
                let (rows, cols) = xhat.shape();
                let mut dx = Matrix::zeros(rows, cols);
                let mut dgain = Matrix::zeros(1, cols);
                let mut dshift = Matrix::zeros(1, cols);
                let n = cols as f64;
                let mut dxhat = vec![0.0; cols];
                for r in 0..rows {
                    let (gr, xr) = (g.row(r), xhat.row(r));
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for c in 0..cols {
                        dxhat[c] = gr[c] * gv[c];
                        mean_d += dxhat[c];
                        mean_dx += dxhat[c] * xr[c];
                        dgain.data_mut()[c] += gr[c] * xr[c];
                        dshift.data_mut()[c] += gr[c];
                    }
                    mean_d /= n;
                    mean_dx /= n;
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = inv_std[r] * (dxhat[c] - mean_d - xr[c] * mean_dx);
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gain, dgain);
                accumulate(grads, *shift, dshift);
            }
            Op::Softmax(x) => {
                let mut dx = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yi), gi) in dx.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *o = yi * (gi - dot);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Relu(x) => {
                let dx = elementwise(g, &vals[x.0], |gi, xi| if xi > 0.0 { gi } else { 0.0 });
                accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = elementwise(g, out, |gi, yi| gi * yi * (1.0 - yi));
                accumulate(grads, *x, dx);
            }
            Op::Softplus(x) => {
                let dx = elementwise(g, &vals[x.0], |gi, xi| gi * sigmoid(xi));
                accumulate(grads, *x, dx);
            }
            Op::Exp(x) => {
                let dx = elementwise(g, out, |gi, yi| gi * yi);
                accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let da = elementwise(g, &vals[b.0], |gi, bi| gi * bi);
                let db = elementwise(g, &vals[a.0], |gi, ai| gi * ai);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Div(a, b) => {
                let bv = &vals[b.0];
                let da = elementwise(g, bv, |gi, bi| gi / bi);
                let mut db = elementwise(g, &vals[a.0], |gi, ai| -gi * ai);
                for (d, bi) in db.data_mut().iter_mut().zip(bv.data()) {
                    *d /= bi * bi;
                }
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Scale(x, c) => accumulate(grads, *x, g.map(|v| v * c)),
            Op::ScaleRows { x, s } => {
                let (xv, sv) = (&vals[x.0], &vals[s.0]);
                let mut dx = g.clone();
                let mut ds = Matrix::zeros(sv.rows(), 1);
                for r in 0..xv.rows() {
                    let f = sv.data()[r];
                    ds.data_mut()[r] = g.row(r).iter().zip(xv.row(r)).map(|(a, b)| a * b).sum();
                    for v in dx.row_mut(r) {
                        *v *= f;
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *s, ds);
            }
            Op::Sum(x) => {
                let xv = &vals[x.0];
                accumulate(grads, *x, Matrix::filled(xv.rows(), xv.cols(), g.item()));
            }
            Op::Mean(x) => {
                let xv = &vals[x.0];
                let v = g.item() / xv.len() as f64;
                accumulate(grads, *x, Matrix::filled(xv.rows(), xv.cols(), v));
            }
            Op::ColMean(x) => {
                let xv = &vals[x.0];
                let n = xv.rows() as f64;
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    for (o, gi) in dx.row_mut(r).iter_mut().zip(g.data()) {
                        *o = gi / n;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::RowSum(x) => {
                let xv = &vals[x.0];
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let gr = g.data()[r];
                    dx.row_mut(r).fill(gr);
                }
                accumulate(grads, *x, dx);
            }
            Op::DotConst { x, weights } => {
                let xv = &vals[x.0];
                let gi = g.item();
                let dx = Matrix::from_vec(xv.rows(), xv.cols(), weights.iter().map(|w| w * gi).collect());
                accumulate(grads, *x, dx);
            }
            Op::GatherRows { x, idx } => {
                let xv = &vals[x.0];
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for (o, &src) in idx.iter().enumerate() {
                    for (d, v) in dx.row_mut(src).iter_mut().zip(g.row(o)) {
                        *d += v;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::ScatterRows { parts } => {
                for (node, idx) in parts {
                    let mut dp = Matrix::zeros(idx.len(), g.cols());
                    for (j, &i) in idx.iter().enumerate() {
                        dp.row_mut(j).copy_from_slice(g.row(i));
                    }
                    accumulate(grads, *node, dp);
                }
            }
            Op::PickCols { x, cols } => {
                let xv = &vals[x.0];
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for (r, &c) in cols.iter().enumerate() {
                    dx.set(r, c, g.data()[r]);
                }
                accumulate(grads, *x, dx);
            }
            Op::SliceCols { x, start } => {
                let xv = &vals[x.0];
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatCols(xs) => {
                let mut c0 = 0;
                for x in xs {
                    let xv = &vals[x.0];
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        dx.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + xv.cols()]);
                    }
                    c0 += xv.cols();
                    accumulate(grads, *x, dx);
                }
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Matrix> = inputs.iter().map(|n| &vals[n.0]).collect();
                let dins = op.backward(&ins, out, g);
                assert_eq!(dins.len(), inputs.len(), "custom op {} returned wrong gradient count", op.name());
                for (node, d) in inputs.iter().zip(dins) {
                    if let Some(d) = d {
                        accumulate(grads, *node, d);
                    }
                }
            }
        }
    }

    /// Gradients of every bound parameter reached by the last backward sweep.
    pub fn param_grads(&self) -> Grads {
        let mut grads = Grads::default();
        for (&pid, node) in &self.params {
            if let Some(g) = self.grad(*node) {
                grads.insert(pid, g.clone());
            }
        }
        grads
    }
}

fn elementwise(g: &Matrix, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
    Matrix::from_vec(g.rows(), g.cols(), data)
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, delta: Matrix) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}
