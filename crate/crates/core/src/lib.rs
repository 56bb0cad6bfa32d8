//! Prompted self-training with bottleneck adapters on a frozen tiny
//! transformer encoder.
//!
//! The crate is organised bottom-up:
//!
//! - [`diffcore`]: tape-based reverse-mode autodiff over `f64` tensors
//! - [`encoder`]: pre-norm transformer encoder with adapter insertion points
//! - [`adapter`]: bottleneck adapters and the tunable parameter set
//! - [`prompting`]: cloze templates, verbalizers and label-word probabilities
//! - [`reweight`]: meta re-weighting of soft pseudo-labels
//! - [`selftrain`]: teacher fine-tuning and the teacher/student session loop
//! - [`data`]: synthetic cloze tasks, vocabulary and nested few-shot splits
//! - [`cli`]: experiment configuration, checkpoints, metrics and reports

pub mod adapter;
pub mod cli;
pub mod data;
pub mod diffcore;
pub mod encoder;
pub mod error;
pub mod optim;
pub mod par;
pub mod prompting;
pub mod reweight;
pub mod selftrain;

pub use error::{Error, Result};
