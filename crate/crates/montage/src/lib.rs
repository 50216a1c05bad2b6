//! Montage pre-training pipeline at desk scale.
//!
//! The crate covers the full loop: extracting positive/negative samples from
//! detection-style annotations, assembling four samples per canvas by aspect
//! ratio, computing effective receptive fields (ERF) on a small convolutional
//! backbone, generating ERF-adaptive soft labels, and training under three
//! classification objectives (ERF-adaptive dense, block-wise, global).
//!
//! The `montage` binary exposes each stage as a subcommand; see the README.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod erf;
pub mod error;
pub mod imageio;
pub mod montage;
pub mod net;
pub mod objective;
pub mod rng;
pub mod sampling;
pub mod schedule;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::MontageError;
