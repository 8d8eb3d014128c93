//! Single-channel blind source separation of RF/radar signals.
//!
//! A mixture of two signals is mapped to its STFT, encoded as log-amplitude
//! and phase, and fed to a dual-path time-frequency Transformer that predicts
//! one complex mask per source. Masked spectrograms are inverted back to the
//! time domain and trained end to end with a permutation-invariant SD-SDR loss.

pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod signal;
pub mod tf_transform;
pub mod training;
pub mod waveforms;

pub use error::{Error, Result};
pub use signal::{TimeSignal, SAMPLE_RATE, WINDOW_LEN};
