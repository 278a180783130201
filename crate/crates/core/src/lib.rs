//! Multi-speaker text-to-wave synthesis.
//!
//! A character-level attention seq2seq produces mel frames and hidden states,
//! a non-causal bridge-net upsamples those to sample rate, and a Gaussian
//! autoregressive WaveNet vocoder emits the waveform. A shared trainable
//! speaker embedding table is biased (project + softsign) into every
//! component, and the whole stack trains jointly.
//!
//! All math is generic over [`scalar::Scalar`]; `f32` is the working type for
//! training and synthesis, `f64` backs the gradient-check test suites.

pub mod bridge;
pub mod config;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod matrix;
pub mod model;
pub mod params;
pub mod scalar;
pub mod speaker;
pub mod seq2seq;
pub mod tape;
pub mod text;
pub mod trainer;
pub mod vocoder;

/// Default working precision for training and synthesis.
pub type Real = f32;
/// Precision used by gradient-check and equivalence test suites.
pub type Check = f64;
