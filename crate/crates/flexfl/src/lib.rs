//! Desk-scale deterministic simulator of heterogeneous federated learning
//! with activation-sparsity-guided flexible pruning, adaptive local
//! re-pruning under uncertain memory, self-knowledge-distillation local
//! training, and overlapping-submodel aggregation.

pub mod apoz;
pub mod config;
pub mod data;
pub mod error;
pub mod fedsim;
pub mod kd;
pub mod nn;
pub mod pruner;

pub use error::{FlexError, Result};
