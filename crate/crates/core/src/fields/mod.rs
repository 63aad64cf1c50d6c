//! Occupancy network, scene sub-networks, the empty-space branch and top-1
//! dispatch between them.

mod encoding;
mod layers;
mod network;

pub use encoding::{encode_batch, encoded_dim, positional_encode};
pub use layers::{Dense, Mlp};
pub use network::{
    top1, Dispatch, FieldForward, FieldQuery, OccupancyField, OccupancyNet, RadianceField, SceneHead,
    EmptyHead,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the occupancy field: occupancy network, `n` scene sub-networks,
/// shared scene head and the empty-space head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Number of scene sub-networks `n`; the gate vector has `n + 1` entries.
    pub n_scene: usize,
    /// Trunk width of the occupancy network and the scene sub-networks.
    pub width: usize,
    /// Frequency bands for positions.
    pub pos_bands: usize,
    /// Frequency bands for view directions.
    pub dir_bands: usize,
    /// Linear layers in the occupancy network (input, inner..., output).
    pub occupancy_layers: usize,
    /// Linear layers in each scene sub-network.
    pub scene_layers: usize,
    /// Hidden width of the color branch of the scene head.
    pub head_width: usize,
    /// Hidden width of the empty-space head.
    pub empty_head_width: usize,
    pub layer_norm_eps: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            n_scene: 2,
            width: 64,
            pos_bands: 6,
            dir_bands: 4,
            occupancy_layers: 4,
            scene_layers: 7,
            head_width: 32,
            empty_head_width: 16,
            layer_norm_eps: 1e-5,
        }
    }
}

impl NetworkConfig {
    /// Occupancy network at the size used for large outdoor scenes: eight scene
    /// sub-networks, 256 channels and ten position bands (63 inputs).
    pub fn large_scale() -> Self {
        Self { n_scene: 8, width: 256, pos_bands: 10, head_width: 128, empty_head_width: 32, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("network: {m}")));
        if self.n_scene == 0 {
            return bad("n_scene must be at least 1");
        }
        if self.width < 2 {
            return bad("width must be at least 2 (layer norm)");
        }
        if self.occupancy_layers < 2 {
            return bad("occupancy_layers must be at least 2");
        }
        if self.scene_layers < 1 {
            return bad("scene_layers must be at least 1");
        }
        if self.head_width == 0 || self.empty_head_width == 0 {
            return bad("head widths must be positive");
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps must be positive");
        }
        Ok(())
    }

    pub fn pos_dim(&self) -> usize {
        encoded_dim(self.pos_bands)
    }

    pub fn dir_dim(&self) -> usize {
        encoded_dim(self.dir_bands)
    }

    /// Index of the empty-space branch in the gate vector.
    pub fn empty_index(&self) -> usize {
        self.n_scene
    }
}

/// Single-MLP radiance field used for guided training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadianceConfig {
    pub layers: usize,
    pub width: usize,
    pub head_width: usize,
    pub pos_bands: usize,
    pub dir_bands: usize,
}

impl Default for RadianceConfig {
    fn default() -> Self {
        Self { layers: 4, width: 64, head_width: 32, pos_bands: 6, dir_bands: 4 }
    }
}

impl RadianceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 || self.head_width == 0 {
            return Err(Error::Config("radiance: layers and widths must be positive".into()));
        }
        Ok(())
    }
}

/// Parts whose parameter count can be queried.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Occupancy,
    SceneSubnetwork,
    SceneHead,
    /// Identity trunk of the empty-space branch.
    EmptyTrunk,
    EmptyHead,
    /// One scene sub-network plus the shared scene head.
    ScenePath,
    /// Empty trunk plus empty head.
    EmptyPath,
    /// Occupancy network, all sub-networks and both heads.
    Total,
}

fn dense(inputs: usize, outputs: usize) -> usize {
    inputs * outputs + outputs
}

/// Closed-form parameter count of a component.
pub fn count_parameters(cfg: &NetworkConfig, component: Component) -> usize {
    let w = cfg.width;
    let pos = cfg.pos_dim();
    let occupancy =
        dense(pos, w) + (cfg.occupancy_layers - 2) * dense(w, w) + dense(w, cfg.n_scene + 1) + 2 * w;
    let subnet = dense(pos, w) + (cfg.scene_layers - 1) * dense(w, w);
    let scene_head = dense(w, 1) + dense(w + cfg.dir_dim(), cfg.head_width) + dense(cfg.head_width, 3);
    let empty_head = dense(pos, cfg.empty_head_width) + dense(cfg.empty_head_width, 4);
    match component {
        Component::Occupancy => occupancy,
        Component::SceneSubnetwork => subnet,
        Component::SceneHead => scene_head,
        Component::EmptyTrunk => 0,
        Component::EmptyHead => empty_head,
        Component::ScenePath => subnet + scene_head,
        Component::EmptyPath => empty_head,
        Component::Total => occupancy + cfg.n_scene * subnet + scene_head + empty_head,
    }
}

/// Closed-form parameter count of the single-MLP radiance field.
pub fn count_radiance_parameters(cfg: &RadianceConfig) -> usize {
    let w = cfg.width;
    dense(encoded_dim(cfg.pos_bands), w)
        + (cfg.layers - 1) * dense(w, w)
        + dense(w, 1)
        + dense(w + encoded_dim(cfg.dir_bands), cfg.head_width)
        + dense(cfg.head_width, 3)
}

/// Cells of a dense `R^3` grid, the grid's parameter count.
pub fn count_grid_cells(resolution: usize) -> usize {
    resolution.pow(3)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn large_scale_occupancy_count() {
        let cfg = NetworkConfig::large_scale();
        assert_eq!(cfg.pos_dim(), 63);
        let expected = 63 * 256 + 256 + 2 * (256 * 256 + 256) + 256 * 9 + 9 + 2 * 256;
        assert_eq!(expected, 150_793);
        assert_eq!(count_parameters(&cfg, Component::Occupancy), 150_793);
    }

    #[test]
    fn grid_cell_counts() {
        assert_eq!(count_grid_cells(128), 2_097_152);
        assert_eq!(count_grid_cells(512), 134_217_728);
        assert_eq!(count_grid_cells(1), 1);
    }

    #[test]
    fn empty_path_is_strictly_smaller() {
        for cfg in [NetworkConfig::default(), NetworkConfig::large_scale()] {
            assert_eq!(count_parameters(&cfg, Component::EmptyTrunk), 0);
            assert!(count_parameters(&cfg, Component::EmptyPath) < count_parameters(&cfg, Component::ScenePath));
        }
    }

    #[test]
    fn validate_rejects_degenerate_configs() {
        assert!(NetworkConfig::default().validate().is_ok());
        assert!(NetworkConfig { n_scene: 0, ..Default::default() }.validate().is_err());
        assert!(NetworkConfig { width: 1, ..Default::default() }.validate().is_err());
    }
}
