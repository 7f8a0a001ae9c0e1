//! Cross-silo federated domain generalization by layer-wise semantic
//! aggregation and cross-layer calibration.

pub mod aggregation;
pub mod analysis;
pub mod datasets;
pub mod error;
pub mod federation;
pub mod losses;
pub mod models;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
