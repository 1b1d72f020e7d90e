//! Sparse-attention planning and operator-fusion autotuning.
//!
//! * [`mask`]: dense masks for sliding-window, dilated, global, random-block,
//!   Longformer and Bigbird patterns.
//! * [`bsr`]: dual full/part block-compressed-sparse-row mask storage.
//! * [`attention`]: reference, block-sparse (online softmax) and row-wise SDPA.
//! * [`kernel`]: analytical row-wise/block-wise selection and block scoring.
//! * [`fusion`]: operator chains, fusion-scheme codes and rule transitions.
//! * [`backend`]: fused CPU segment executors and a synthetic cost model.
//! * [`search`]: two-stage fusion/parameter tuner with a measurement cache.

pub mod attention;
pub mod backend;
mod bits;
pub mod bsr;
pub mod error;
pub mod fusion;
pub mod kernel;
pub mod mask;
pub mod search;

pub use error::{Error, Result};
