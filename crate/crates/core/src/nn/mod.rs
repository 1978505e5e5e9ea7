//! Minimal neural-network substrate: dense f64 matrices, a parameter store
//! with group tags, a reverse-mode tape, MLPs, Adam, and binary checkpoints.
//!
//! Everything is f64. The gradient tooling is verified against central
//! finite differences, and several downstream checks require relative errors
//! around 1e-4 at a probe step of 1e-5, which single precision cannot
//! deliver.

pub mod adam;
pub mod checkpoint;
pub mod matrix;
pub mod mlp;
pub mod params;
pub mod tape;

pub use adam::{Adam, AdamConfig};
pub use matrix::Matrix;
pub use mlp::{Activation, Mlp, MlpSpec};
pub use params::{ParamGroup, ParamId, ParamStore, ParamTensor};
pub use tape::{NodeId, Tape};
