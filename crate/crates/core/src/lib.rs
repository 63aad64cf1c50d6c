//! Learned occupancy for radiance-field training.
//!
//! A small classification network dispatches every ray sample either to one
//! of `n` scene sub-networks or to an identity-trunk empty-space branch. It is
//! trained jointly with the radiance field through the gate values, an
//! imbalanced load loss and a detached density-ratio loss, and then frozen to
//! filter samples. A momentum occupancy grid is provided as a baseline, along
//! with analytic scenes that give exact occupancy ground truth.

pub mod config;
pub mod diff;
pub mod error;
pub mod eval;
pub mod fields;
pub mod geom;
pub mod grid;
pub mod losses;
pub mod pipeline;
pub mod rendering;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
