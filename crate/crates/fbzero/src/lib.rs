//! Forward-backward behavioral foundation model on toy continuous control.
//!
//! The crate pre-trains a latent-promptable policy with forward-backward
//! representations on two built-in environments (a 2-D point mass and a
//! 2-joint planar arm), regularized toward a synthetic expert motion dataset
//! by a latent-conditioned discriminator. A trained checkpoint can then be
//! prompted zero-shot for reward maximization, goal reaching and motion
//! tracking, and adapted few-shot by optimizing in latent space.
//!
//! Entry points:
//! - [`trainer::run_pretraining`] — the full pre-training loop.
//! - [`inference`] — zero-shot prompting of a trained checkpoint.
//! - [`adaptation`] — CEM and annealed trajectory optimization over latents.
//! - [`evaluation`] — task suite, E_mpjpe and earth-mover's-distance metrics.
//!
//! See the `examples/` directory for one runnable example per capability and
//! the `fbzero` binary for the command-line surface.

pub mod adaptation;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod evaluation;
pub mod fbcore;
pub mod inference;
pub mod metrics;
pub mod motions;
pub mod nets;
pub mod plot;
pub mod tensor;
pub mod toyenv;
pub mod trainer;
