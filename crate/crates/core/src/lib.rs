//! Demonstration-augmented model-based RL with online stage-reward
//! densification.
//!
//! The crate is organised bottom-up:
//! - [`nn`]: f64 matrices, reverse-mode tape, MLPs, Adam, checkpoints.
//! - [`envs`]: multi-stage manipulation tasks with sparse stage rewards and
//!   scripted demonstrators.
//! - [`rewardlearn`]: stage labeling and online discriminator-based reward
//!   densification.
//! - [`data`]: replay and demonstration storage with mixed sampling.
//! - [`worldmodel`]: latent dynamics model, value ensemble, policy prior and
//!   their losses.
//! - [`planner`]: sampling-based trajectory optimizer over the latent model.
//! - [`bc`]: behavior-cloning pretraining.
//! - [`trainer`]: the two-phase training loop, evaluation and metrics.
//! - [`config`] / [`metrics`]: flat run configuration and CSV emission.

pub mod bc;
pub mod config;
pub mod data;
pub mod envs;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod planner;
pub mod rewardlearn;
pub mod rng;
pub mod trainer;
pub mod worldmodel;

pub use config::TrainConfig;
pub use envs::{Action, EnvSpec, Observation, StageEnv, StageReward};
pub use error::{Error, Result};
