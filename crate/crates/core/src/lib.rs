//! Cross-layer low-rank residual transformers: model, manual gradients,
//! activation recomputation, residual analysis, cost accounting and training.

pub mod analysis;
pub mod backprop;
pub mod cost;
pub mod error;
pub mod model;
pub mod presets;
pub mod recompute;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Matrix;
