//! Teacher-aligned contrastive representation learning for proprioceptive
//! locomotion control.
//!
//! The crate contains everything needed to train and evaluate a recurrent
//! proprioceptive policy whose encoder is aligned to a privileged teacher
//! encoder with a triplet objective:
//!
//! - [`autodiff`]: reverse-mode differentiation over dense matrices.
//! - [`nets`]: encoders, actor, critic, dynamics model and velocity estimator.
//! - [`envsim`]: the vectorized, domain-randomized proxy locomotion task.
//! - [`repr`]: triplet construction, negative sampling and the triplet loss.
//! - [`ppo`]: rollout storage, GAE, PPO losses and the update step.
//! - [`evalsuite`]: scenario evaluation, composite metrics, latent export.
//! - [`trainer`]: the outer training loop tying everything together.

// `!(x > 0.0)` deliberately rejects NaN; index loops walk several
// parallel buffers at once.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod envsim;
pub mod error;
pub mod evalsuite;
pub mod model;
pub mod nets;
pub mod optim;
pub mod ppo;
pub mod repr;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
