//! Weakly supervised referring segmentation on precomputed patch features:
//! slots discover entities bottom-up, a cross-attention step scores them
//! against a text embedding top-down, and the two attention maps compose
//! into a segmentation mask. Training needs no pixel labels — a batch-level
//! contrastive loss plus feature reconstruction supervise everything.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod discovery;
pub mod error;
pub mod features;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod inference;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod util;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;
