//! Frequency-domain analysis and NIR-guided denoising.

pub mod autograd;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod error;
pub mod freq_analysis;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod network;
pub mod noise;
pub mod params;
pub mod spectral;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
