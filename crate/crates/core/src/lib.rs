//! Cross-domain CTR recommendation with a centralized-distributed transfer
//! model: a reverse-mode autodiff engine, a synthetic click generator with
//! known ground truth, the model itself, training, and evaluation.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dataset_io;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod model;
pub mod rng;
pub mod schema;
pub mod tape;
pub mod tensor;
pub mod train;

pub use tape::{ActKind, EwKind, Gradients, NodeId, Tape};
pub use tensor::{Tensor, TensorError};
