//! Federated-learning simulator with zero-shot class unlearning.
//!
//! The crate covers the full desk-scale experiment loop: dataset loading and
//! client partitioning, federated training with FedAvg, error-minimization
//! proxy-noise synthesis, knowledge disentanglement, multi-loss unlearning
//! with gradient masking and harmonization, an optional zero-shot repair
//! pass, reference baselines, and the audit metrics used to compare an
//! unlearned model against a retrained oracle.
//!
//! Numeric code is generic over the scalar type: `f32` for simulation
//! throughput, `f64` wherever finite-difference checks need headroom.

pub mod data;
pub mod error;
pub mod nn;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default scalar for simulation runs.
pub type RunScalar = f32;

/// `f32` model used by the CLI and the experiment pipeline.
pub type RunModel = nn::Model<f32>;
/// `f32` flat parameter vector.
pub type RunParams = nn::ModelParams<f32>;
