//! Semi-supervised verification with twin encoder/decoder networks.
//!
//! Two inputs are embedded by one shared encoder; their Euclidean distance
//! decides whether they belong to the same class. A shared decoder
//! reconstructs each input, so unlabeled pairs still contribute gradient.

pub mod arch;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod layers;
pub mod loss;
pub mod model;
pub mod network;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Result, SevenError};
pub use tensor::Tensor;
