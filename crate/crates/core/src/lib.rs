//! Class-aware, block-aware domain adaptation for block-designed
//! physiological time series.
//!
//! The crate is organized bottom-up:
//!
//! - [`dataframe`]: the sample model (subject / session / block / trial
//!   keys), the on-disk manifest, windowing, and a synthetic corpus
//!   generator with controllable domain shift.
//! - [`splits`]: train/test partitions along one experiment axis and
//!   k-fold cross-subject plans.
//! - [`discrepancy`]: Gaussian-kernel MMD, class-aware CDD, the block-aware
//!   CABA term (all with exact feature gradients) and a 1-Wasserstein
//!   diagnostic.
//! - [`mixer`]: the adapted MLP-Mixer classifier with hand-written
//!   reverse-mode gradients, a MAC counter and checkpoints.
//! - [`trainer`]: the combined objective, the contrastive mini-batch
//!   sampler, Adam, early stopping, grid search and a finite-difference
//!   gradient check.
//! - [`evalsuite`]: k-fold evaluation, split-scenario diagnostics, the CABA
//!   ablation and channel-masking importance.
//! - [`cli`]: configuration files and the commands behind the `caba` binary.

pub mod cli;
pub mod dataframe;
pub mod discrepancy;
pub mod error;
pub mod evalsuite;
pub mod mixer;
pub mod splits;
pub mod trainer;

pub use error::{Error, Result};
