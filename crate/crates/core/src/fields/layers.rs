use crate::diff::{Graph, NodeId, ParamId, ParamStore};
use crate::error::Result;

/// Fully connected layer `x W + b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        let weight = store.add_uniform(&format!("{name}.weight"), inputs, outputs, inputs)?;
        let bias = store.add_uniform(&format!("{name}.bias"), 1, outputs, inputs)?;
        Ok(Self { weight, bias, inputs, outputs })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, b)
    }
}

/// Stack of dense layers with ReLU after every layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, width: usize, depth: usize) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| Dense::new(store, &format!("{name}.{i}"), if i == 0 { inputs } else { width }, width))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: NodeId) -> Result<NodeId> {
        for layer in &self.layers {
            let h = layer.forward(g, store, x)?;
            x = g.relu(h);
        }
        Ok(x)
    }
}
