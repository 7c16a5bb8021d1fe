//! Differentiable harmonic-plus-noise speech synthesis.
//!
//! The crate is organised bottom-up:
//!
//! - [`audio`]: WAV input/output and band-limited resampling.
//! - [`features`]: STFT/iSTFT, the mel filterbank and log-mel extraction.
//! - [`pitch`]: an NCCF + Viterbi pitch tracker producing [`pitch::F0Contour`]s.
//! - [`autodiff`]: a tape-based reverse-mode engine over dense tensors.
//! - [`synth`]: the harmonic oscillator bank and filtered-noise branch.
//! - [`net`]: the ConvReLUNorm parameter estimator.
//! - [`fit`]: mel-L1 loss, AdamW and the single-utterance fitting loop.
//! - [`featfile`]: the binary feature and checkpoint containers.

pub mod audio;
pub mod autodiff;
mod error;
pub mod featfile;
pub mod features;
pub mod fit;
pub mod net;
pub mod pitch;
pub mod synth;

pub use error::{Error, Result};

/// Sample rate every pipeline stage runs at.
pub const SAMPLE_RATE: u32 = 16_000;
/// Analysis hop in samples; gives the 100 Hz frame rate shared by mel, F0 and synthesis.
pub const HOP: usize = 160;
