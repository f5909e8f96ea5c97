use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::GridGeometry;

/// Architecture of the collaborative detector.
///
/// The adaptation method is not part of this struct: one trained base model
/// hosts many methods, so checkpoints are keyed by the architecture alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Observation channels (`C_in`).
    pub in_channels: usize,
    /// Intermediate feature channels (`C`).
    pub channels: usize,
    /// Width of the hidden encoder layers.
    pub encoder_width: usize,
    /// One 3x3 conv + ReLU per entry.
    pub encoder_strides: Vec<usize>,
    /// Number of attention fusion layers (`L`).
    pub fusion_layers: usize,
    /// Query/key width of the fusion attention.
    pub head_dim: usize,
    pub residual: bool,
    /// Observation grid.
    pub grid: GridGeometry,
    /// Channel reduction inside adapters (`r`).
    pub bottleneck_rate: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 2,
            channels: 16,
            encoder_width: 80,
            encoder_strides: vec![2, 2, 1],
            fusion_layers: 1,
            head_dim: 16,
            residual: true,
            grid: GridGeometry { x_min: -32.0, y_min: -16.0, cell_size: 1.0, rows: 32, cols: 64 },
            bottleneck_rate: 4,
        }
    }
}

impl ModelConfig {
    pub fn total_stride(&self) -> usize {
        self.encoder_strides.iter().product()
    }

    /// Geometry of the intermediate feature maps.
    pub fn feature_grid(&self) -> GridGeometry {
        self.grid.downsample(self.total_stride())
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.channels / self.bottleneck_rate
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("channels", self.channels),
            ("encoder_width", self.encoder_width),
            ("fusion_layers", self.fusion_layers),
            ("head_dim", self.head_dim),
            ("bottleneck_rate", self.bottleneck_rate),
            ("grid.rows", self.grid.rows),
            ("grid.cols", self.grid.cols),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.encoder_strides.is_empty() || self.encoder_strides.contains(&0) {
            return Err(Error::Config("encoder_strides must be non-empty and positive".into()));
        }
        if !(self.grid.cell_size > 0.0) {
            return Err(Error::Config("grid.cell_size must be positive".into()));
        }
        let s = self.total_stride();
        if !self.grid.rows.is_multiple_of(s) || !self.grid.cols.is_multiple_of(s) {
            return Err(Error::Config(format!(
                "grid {}x{} not divisible by encoder stride {s}",
                self.grid.rows, self.grid.cols
            )));
        }
        if !self.channels.is_multiple_of(self.bottleneck_rate) {
            return Err(Error::Config(format!(
                "bottleneck rate {} does not divide {} channels",
                self.bottleneck_rate, self.channels
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding; stored in checkpoints.
    pub fn hash(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).into()
    }
}
