//! Reverse-mode differentiation over dense `f64` matrices, plus Adam.

mod graph;
mod matrix;
mod params;

pub use graph::{CustomOp, Graph, NodeId};
pub use matrix::Matrix;
pub use params::{AdamConfig, Checkpoint, CheckpointParam, Grads, ParamId, ParamStore};
