//! Centered reward distillation for small conditional flow-matching models.
//!
//! The crate pretrains a velocity-field MLP on a synthetic task, fine-tunes it
//! against a bounded reward with a centered implicit-reward matching loss and
//! a guidance-anchored KL term, and checks the underlying identities against
//! closed-form oracles on finite distributions.
//!
//! Module map:
//! - [`tensor`]: parameters, the MLP, exact gradients, AdamW.
//! - [`flow`]: forward process, pretraining loss, guidance, Euler sampler.
//! - [`reward`]: tasks, rewards, group normalization, best-of-N.
//! - [`objectives`]: implicit rewards and every training loss.
//! - [`trainer`]: pretraining and the fine-tuning loop.
//! - [`tilt`]: exact tilting of discrete distributions.
//! - [`io`]: configs, run directories, checkpoints, metrics, plots.

// Negated comparisons such as `!(x > 0.0)` are used on purpose so NaN fails
// validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod flow;
pub mod io;
pub mod objectives;
pub mod reward;
pub mod tensor;
pub mod tilt;
pub mod trainer;

pub use error::{Error, Result};
