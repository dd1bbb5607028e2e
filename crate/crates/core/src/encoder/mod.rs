//! Deterministic forward-only face/graph encoder.
//!
//! Three same-padded 3×3 convolutions run on each face grid, the last map is
//! mask-pooled and projected to a face embedding, and two GIN message-passing
//! layers propagate embeddings over the face-adjacency graph. Together with the
//! input features this yields seven activation sites.

mod forward;
mod weights;

pub use forward::{forward, forward_traced, ActivationSet, EncoderInput, LayerLayout, Trace};
pub use weights::{init_weights, load_weights, save_weights, Conv2d, GinLayer, Linear, Provenance, WeightBundle};

use serde::{Deserialize, Serialize};

/// Channels of the input feature layer (xyz + normal).
pub const FEATURE_DIM: usize = 6;
/// Channels fed to the first convolution (features + mask).
pub const INPUT_DIM: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub conv_channels: Vec<usize>,
    pub face_embed_dim: usize,
    pub gnn_dims: Vec<usize>,
    /// Width of the hidden layer inside each GIN MLP.
    pub gnn_hidden: usize,
    pub kernel: usize,
    pub gin_epsilon: f64,
    pub seed: u64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            conv_channels: vec![16, 32, 64],
            face_embed_dim: 64,
            gnn_dims: vec![64, 64],
            gnn_hidden: 64,
            kernel: 3,
            gin_epsilon: 0.0,
            seed: 0,
        }
    }
}

impl EncoderSpec {
    pub fn with_seed(seed: u64) -> Self {
        EncoderSpec {
            seed,
            ..Default::default()
        }
    }

    /// Channel count per activation site; `[6, 16, 32, 64, 64, 64, 64]` by default.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut d = vec![FEATURE_DIM];
        d.extend(&self.conv_channels);
        d.push(self.face_embed_dim);
        d.extend(&self.gnn_dims);
        d
    }

    pub fn num_layers(&self) -> usize {
        self.conv_channels.len() + self.gnn_dims.len() + 2
    }

    /// Layers with one activation per UV sample (features and convolutions).
    pub fn num_spatial(&self) -> usize {
        self.conv_channels.len() + 1
    }

    pub fn layer_names(&self) -> Vec<String> {
        let mut n = vec!["features".to_string()];
        n.extend((1..=self.conv_channels.len()).map(|i| format!("conv{i}")));
        n.push("face_embed".into());
        n.extend((1..=self.gnn_dims.len()).map(|i| format!("gin{i}")));
        n
    }

    pub(crate) fn check(&self) -> crate::Result<()> {
        if self.kernel != 3 {
            return Err(crate::Error::Shape(format!(
                "kernel must be 3×3, found {0}×{0}",
                self.kernel
            )));
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(crate::Error::Shape("conv channels must be non-empty and positive".into()));
        }
        if self.face_embed_dim == 0 || self.gnn_hidden == 0 || self.gnn_dims.contains(&0) {
            return Err(crate::Error::Shape("zero-width layer".into()));
        }
        Ok(())
    }
}
