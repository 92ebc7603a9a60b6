//! Desk-scale conditional diffusion toolkit for subject/action image
//! personalization.
//!
//! The pipeline: render a synthetic sprite benchmark with exact ground-truth
//! targets, train a small conditional denoiser on the vocabulary, finetune
//! low-rank adapters on a (source, driving) image pair, then sample the
//! target image with stepwise condition prompting and Fourier
//! amplitude/phase guidance. Evaluation compares generations against the
//! oracle renders.

pub mod checkpoint;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod finetune;
pub mod fourier;
pub mod guidance;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod schedule;
pub mod sprites;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::ImageTensor;
