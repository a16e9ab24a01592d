#![forbid(unsafe_code)]

//! AICRN: attention-integrated convolutional residual networks for ECG
//! parameter regression.
//!
//! The crate is self-contained: a small reverse-mode autodiff tensor engine,
//! the 1-D layers and CBAM attention blocks the architecture is made of, the
//! Nadam training loop with early stopping and checkpointing, a CSV data
//! pipeline for 8-lead ECG records, and a synthetic ECG generator whose six
//! regression labels (PR, QT, QRS, heart rate, R-peak amplitude, T-wave
//! amplitude) are known by construction.

pub mod cbam;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod report;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod timeutil;
pub mod train;

pub use error::{Error, Result};
