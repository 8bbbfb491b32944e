//! A small laboratory for softmax-attention diffusion denoisers on
//! multi-token Gaussian mixture data.
//!
//! The crate trains the one-layer attention denoiser `v_t (X - X softmax(X^T W X / d))`
//! on the DDPM noise-prediction loss and measures it against exact oracles:
//! the oracle MMSE estimator that knows the token means, the Bayes-optimal
//! estimator computed by enumerating latent subsets, and the exact score.
//!
//! Module map:
//!
//! - [`patterns`]: pattern sets and data sampling
//! - [`schedule`]: noise schedules, forward noising, SNR
//! - [`model`]: the denoiser, its loss and analytic gradients, checkpoints
//! - [`oracle`]: oracle/Bayes estimators, risks, scores
//! - [`diagnostics`]: attention probes
//! - [`trainer`]: gradient descent and evaluation traces
//! - [`experiment`]: runs, sweeps and figure bundles behind the `mtgm-lab` binary

pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod model;
pub mod oracle;
pub mod patterns;
pub mod rng;
pub mod schedule;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};
