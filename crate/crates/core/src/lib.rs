//! Distortion-guided sparse image restoration.
//!
//! A degraded image is first passed through a small localization network
//! that predicts a binary distortion mask. A restoration network then uses
//! the mask to modulate, convolve and attend only where the image is
//! degraded, leaving clean pixels alone.

pub mod autodiff;
pub mod bench;
pub mod cli;
pub mod error;
pub mod guided;
pub mod io;
pub mod metrics;
pub mod nets;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
