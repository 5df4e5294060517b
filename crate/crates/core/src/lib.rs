//! Discovery of low-dimensional stochastic dynamics from synthetic video.
//!
//! The pipeline has four stages, each usable on its own:
//!
//! 1. [`sde`] simulates a latent stochastic system (a 1D double well by
//!    default) with Euler-Maruyama.
//! 2. [`embedding`] renders the latent trajectory as frames of a moving
//!    Gaussian blob, producing the observation dataset.
//! 3. [`training`] fits an encoder-decoder pair under a dynamics-constrained
//!    reconstruction loss. The drift and diffusion entering the loss come
//!    from a frozen, non-trainable [`estimator`] conditioned on the current
//!    encoder outputs; only the autoencoder parameters move.
//! 4. [`eval`] gauge-fixes the learned latent coordinate by linear alignment
//!    with the ground truth and scores the recovered vector fields.
//!
//! All stochastic steps are seeded and bit-reproducible. The [`cli`] module
//! exposes the stages as subcommands of the `latent-sde` binary.

pub mod artifact;
pub mod cli;
pub mod config;
pub mod embedding;
pub mod error;
pub mod estimator;
pub mod eval;
pub mod nn;
pub mod plot;
pub mod rng;
pub mod sde;
pub mod training;

pub use error::{Error, Result};
