use crate::diff::{Graph, Matrix, NodeId, ParamId, ParamStore};
use crate::error::Result;

use super::encoding::encode_batch;
use super::layers::{Dense, Mlp};
use super::{NetworkConfig, RadianceConfig};

/// Rows evaluated per graph when querying a field outside training.
const QUERY_CHUNK: usize = 4096;

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn top1(gates: &Matrix) -> Vec<usize> {
    (0..gates.rows())
        .map(|r| {
            let row = gates.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Partition of a batch by top-1 branch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dispatch {
    /// Original row indices per branch, ascending.
    pub lists: Vec<Vec<usize>>,
    /// Position of each original row in the branch-major order (concatenated lists).
    pub inverse: Vec<usize>,
}

impl Dispatch {
    pub fn new(top1: &[usize], branches: usize) -> Self {
        let mut lists = vec![Vec::new(); branches];
        for (i, &k) in top1.iter().enumerate() {
            lists[k].push(i);
        }
        let mut inverse = vec![0; top1.len()];
        for (pos, &i) in lists.iter().flatten().enumerate() {
            inverse[i] = pos;
        }
        Self { lists, inverse }
    }

    pub fn counts(&self) -> Vec<usize> {
        self.lists.iter().map(Vec::len).collect()
    }

    /// Reorders `xs` into branch-major order.
    pub fn gather<T: Clone>(&self, xs: &[T]) -> Vec<T> {
        self.lists.iter().flatten().map(|&i| xs[i].clone()).collect()
    }

    /// Undoes [`Dispatch::gather`].
    pub fn scatter<T: Clone>(&self, permuted: &[T]) -> Vec<T> {
        self.inverse.iter().map(|&p| permuted[p].clone()).collect()
    }
}

/// Gate classifier: input layer, layer norm, inner layers, output layer, softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyNet {
    input: Dense,
    norm_gain: ParamId,
    norm_shift: ParamId,
    inner: Vec<Dense>,
    output: Dense,
    eps: f64,
}

impl OccupancyNet {
    pub fn new(store: &mut ParamStore, cfg: &NetworkConfig) -> Result<Self> {
        let w = cfg.width;
        let input = Dense::new(store, "occ.input", cfg.pos_dim(), w)?;
        let norm_gain = store.add_constant("occ.norm.gain", 1, w, 1.0)?;
        let norm_shift = store.add_constant("occ.norm.shift", 1, w, 0.0)?;
        let inner = (0..cfg.occupancy_layers - 2)
            .map(|i| Dense::new(store, &format!("occ.inner.{i}"), w, w))
            .collect::<Result<_>>()?;
        let output = Dense::new(store, "occ.output", w, cfg.n_scene + 1)?;
        Ok(Self { input, norm_gain, norm_shift, inner, output, eps: cfg.layer_norm_eps })
    }

    pub fn logits(&self, g: &mut Graph, store: &ParamStore, pos: NodeId) -> Result<NodeId> {
        let h = self.input.forward(g, store, pos)?;
        let gain = g.param(store, self.norm_gain);
        let shift = g.param(store, self.norm_shift);
        let h = g.layer_norm(h, gain, shift, self.eps);
        let mut h = g.relu(h);
        for layer in &self.inner {
            let z = layer.forward(g, store, h)?;
            h = g.relu(z);
        }
        self.output.forward(g, store, h)
    }

    /// Normalized gate values, one row of `n + 1` per point.
    pub fn gates(&self, g: &mut Graph, store: &ParamStore, pos: NodeId) -> Result<NodeId> {
        let logits = self.logits(g, store, pos)?;
        Ok(g.softmax(logits))
    }

    pub fn output_layer(&self) -> Dense {
        self.output
    }

    /// Parameter ids of the whole network.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.input.weight, self.input.bias, self.norm_gain, self.norm_shift];
        for l in &self.inner {
            ids.extend([l.weight, l.bias]);
        }
        ids.extend([self.output.weight, self.output.bias]);
        ids
    }
}

/// Shared head of the scene sub-networks: density from the trunk feature,
/// color from the feature and the encoded view direction.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneHead {
    density: Dense,
    color_hidden: Dense,
    color_out: Dense,
}

impl SceneHead {
    pub fn new(store: &mut ParamStore, name: &str, feature: usize, dir_dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            density: Dense::new(store, &format!("{name}.density"), feature, 1)?,
            color_hidden: Dense::new(store, &format!("{name}.color.0"), feature + dir_dim, hidden)?,
            color_out: Dense::new(store, &format!("{name}.color.1"), hidden, 3)?,
        })
    }

    /// Returns `(sigma, rgb)` nodes.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, feat: NodeId, dir: NodeId) -> Result<(NodeId, NodeId)> {
        let s = self.density.forward(g, store, feat)?;
        let sigma = g.softplus(s);
        let cat = g.concat_cols(&[feat, dir]);
        let h = self.color_hidden.forward(g, store, cat)?;
        let h = g.relu(h);
        let c = self.color_out.forward(g, store, h)?;
        let rgb = g.sigmoid(c);
        Ok((sigma, rgb))
    }
}

/// Two-layer head of the empty-space branch. Position features only.
#[derive(Clone, Debug, PartialEq)]
pub struct EmptyHead {
    hidden: Dense,
    out: Dense,
}

impl EmptyHead {
    pub fn new(store: &mut ParamStore, inputs: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            hidden: Dense::new(store, "empty_head.0", inputs, hidden)?,
            out: Dense::new(store, "empty_head.1", hidden, 4)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<(NodeId, NodeId)> {
        let h = self.hidden.forward(g, store, x)?;
        let h = g.relu(h);
        let out = self.out.forward(g, store, h)?;
        let s = g.slice_cols(out, 0, 1);
        let c = g.slice_cols(out, 1, 4);
        Ok((g.softplus(s), g.sigmoid(c)))
    }
}

/// Per-point outputs of an occupancy-field forward pass, in input order.
pub struct FieldForward {
    /// `P x 1`, nonnegative.
    pub sigma: NodeId,
    /// `P x 3`, in `[0, 1]`.
    pub rgb: NodeId,
    /// `P x (n + 1)` gate values.
    pub gates: NodeId,
    pub top1: Vec<usize>,
    pub dispatch: Dispatch,
    pub empty_index: usize,
}

impl FieldForward {
    pub fn routed_to_empty(&self, i: usize) -> bool {
        self.top1[i] == self.empty_index
    }

    pub fn empty_mask(&self) -> Vec<bool> {
        self.top1.iter().map(|&k| k == self.empty_index).collect()
    }
}

/// Values of a field evaluated outside training.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldQuery {
    pub sigma: Vec<f64>,
    pub rgb: Vec<[f64; 3]>,
    /// Routed branch per point; empty for fields without routing.
    pub top1: Vec<usize>,
}

impl FieldQuery {
    fn with_capacity(n: usize) -> Self {
        Self { sigma: Vec::with_capacity(n), rgb: Vec::with_capacity(n), top1: Vec::new() }
    }

    fn extend(&mut self, g: &Graph, sigma: NodeId, rgb: NodeId) {
        self.sigma.extend_from_slice(g.value(sigma).data());
        let c = g.value(rgb);
        self.rgb.extend((0..c.rows()).map(|r| [c.get(r, 0), c.get(r, 1), c.get(r, 2)]));
    }
}

/// Occupancy network, `n` scene sub-networks with a shared head, and the
/// identity-trunk empty-space branch.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyField {
    pub cfg: NetworkConfig,
    pub occupancy: OccupancyNet,
    pub scenes: Vec<Mlp>,
    pub scene_head: SceneHead,
    pub empty_head: EmptyHead,
}

impl OccupancyField {
    pub fn new(store: &mut ParamStore, cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let occupancy = OccupancyNet::new(store, cfg)?;
        let scenes = (0..cfg.n_scene)
            .map(|k| Mlp::new(store, &format!("scene.{k}"), cfg.pos_dim(), cfg.width, cfg.scene_layers))
            .collect::<Result<_>>()?;
        let scene_head = SceneHead::new(store, "scene_head", cfg.width, cfg.dir_dim(), cfg.head_width)?;
        let empty_head = EmptyHead::new(store, cfg.pos_dim(), cfg.empty_head_width)?;
        Ok(Self { cfg: cfg.clone(), occupancy, scenes, scene_head, empty_head })
    }

    /// Full pass: gates, top-1 dispatch, branch evaluation, restore order.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, pos: NodeId, dir: NodeId) -> Result<FieldForward> {
        let gates = self.occupancy.gates(g, store, pos)?;
        self.forward_with_gates(g, store, pos, dir, gates)
    }

    /// Dispatch and branch evaluation for externally supplied gates.
    pub fn forward_with_gates(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        pos: NodeId,
        dir: NodeId,
        gates: NodeId,
    ) -> Result<FieldForward> {
        let total = g.value(pos).rows();
        let empty_index = self.cfg.empty_index();
        let top1 = top1(g.value(gates));
        let dispatch = Dispatch::new(&top1, empty_index + 1);
        let gate_value = g.pick_cols(gates, &top1);

        let mut parts = Vec::new();
        for (k, idx) in dispatch.lists.iter().enumerate() {
            if idx.is_empty() {
                continue;
            }
            let o = g.gather_rows(gate_value, idx);
            let x = g.gather_rows(pos, idx);
            let (sigma, rgb) = if k == empty_index {
                // Identity trunk: the encoded point itself, scaled by its gate.
                let scaled = g.scale_rows(x, o);
                self.empty_head.forward(g, store, scaled)?
            } else {
                let feat = self.scenes[k].forward(g, store, x)?;
                let scaled = g.scale_rows(feat, o);
                let d = g.gather_rows(dir, idx);
                self.scene_head.forward(g, store, scaled, d)?
            };
            let both = g.concat_cols(&[sigma, rgb]);
            parts.push((both, idx.clone()));
        }
        let merged = g.scatter_rows(parts, total, 4);
        let sigma = g.slice_cols(merged, 0, 1);
        let rgb = g.slice_cols(merged, 1, 4);
        Ok(FieldForward { sigma, rgb, gates, top1, dispatch, empty_index })
    }

    /// Gate values for a batch of raw positions.
    pub fn gate_values(&self, store: &ParamStore, positions: &[[f64; 3]]) -> Result<Matrix> {
        let cols = self.cfg.n_scene + 1;
        let mut data = Vec::with_capacity(positions.len() * cols);
        for chunk in positions.chunks(QUERY_CHUNK) {
            let mut g = Graph::new();
            let pos = g.constant(encode_batch(chunk, self.cfg.pos_bands));
            let gates = self.occupancy.gates(&mut g, store, pos)?;
            data.extend_from_slice(g.value(gates).data());
        }
        Ok(Matrix::from_vec(positions.len(), cols, data))
    }

    /// Occupied iff the top-1 branch is a scene sub-network.
    pub fn predict_occupied(&self, store: &ParamStore, positions: &[[f64; 3]]) -> Result<Vec<bool>> {
        let gates = self.gate_values(store, positions)?;
        let empty = self.cfg.empty_index();
        Ok(top1(&gates).into_iter().map(|k| k != empty).collect())
    }

    pub fn query(&self, store: &ParamStore, positions: &[[f64; 3]], dirs: &[[f64; 3]]) -> Result<FieldQuery> {
        assert_eq!(positions.len(), dirs.len());
        let mut out = FieldQuery::with_capacity(positions.len());
        for (pc, dc) in positions.chunks(QUERY_CHUNK).zip(dirs.chunks(QUERY_CHUNK)) {
            let mut g = Graph::new();
            let pos = g.constant(encode_batch(pc, self.cfg.pos_bands));
            let dir = g.constant(encode_batch(dc, self.cfg.dir_bands));
            let f = self.forward(&mut g, store, pos, dir)?;
            out.extend(&g, f.sigma, f.rgb);
            out.top1.extend_from_slice(&f.top1);
        }
        Ok(out)
    }
}

/// Plain radiance field: one ReLU trunk and a [`SceneHead`].
#[derive(Clone, Debug, PartialEq)]
pub struct RadianceField {
    pub cfg: RadianceConfig,
    pub trunk: Mlp,
    pub head: SceneHead,
}

impl RadianceField {
    pub fn new(store: &mut ParamStore, cfg: &RadianceConfig) -> Result<Self> {
        cfg.validate()?;
        let pos_dim = super::encoded_dim(cfg.pos_bands);
        let trunk = Mlp::new(store, "field.trunk", pos_dim, cfg.width, cfg.layers)?;
        let head = SceneHead::new(store, "field.head", cfg.width, super::encoded_dim(cfg.dir_bands), cfg.head_width)?;
        Ok(Self { cfg: cfg.clone(), trunk, head })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, pos: NodeId, dir: NodeId) -> Result<(NodeId, NodeId)> {
        let feat = self.trunk.forward(g, store, pos)?;
        self.head.forward(g, store, feat, dir)
    }

    pub fn query(&self, store: &ParamStore, positions: &[[f64; 3]], dirs: &[[f64; 3]]) -> Result<FieldQuery> {
        assert_eq!(positions.len(), dirs.len());
        let mut out = FieldQuery::with_capacity(positions.len());
        for (pc, dc) in positions.chunks(QUERY_CHUNK).zip(dirs.chunks(QUERY_CHUNK)) {
            let mut g = Graph::new();
            let pos = g.constant(encode_batch(pc, self.cfg.pos_bands));
            let dir = g.constant(encode_batch(dc, self.cfg.dir_bands));
            let (sigma, rgb) = self.forward(&mut g, store, pos, dir)?;
            out.extend(&g, sigma, rgb);
        }
        Ok(out)
    }
}
