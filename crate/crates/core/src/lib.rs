//! Few-shot style similarity for B-Rep solids sampled as UV grids.
//!
//! Layer-wise Gram matrices of a deterministic encoder's activations form a
//! style embedding; a weighted sum of per-layer cosine distances gives the
//! style distance, and the layer weights can be fitted from a handful of
//! positive and negative exemplars.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root fix it to `f64`, which is what the tools use.

mod bin;
pub mod error;
pub mod geom;
pub mod scalar;
pub mod synth;

pub use error::{Error, ParseError, Result};
pub use scalar::Scalar;
pub mod encoder;
pub mod linalg;
pub mod style;
pub mod index;
pub mod fewshot;
pub mod grad;
pub mod eval;

pub type Embedding = style::GramEmbedding<f64>;
pub type Pca = style::PcaModel<f64>;
pub type Weights = encoder::WeightBundle<f64>;
