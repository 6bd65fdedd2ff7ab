//! Quality-guided mixture of score-fusion experts for multimodal biometrics.

pub mod baselines;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod quality;
pub mod report;
pub mod scores;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
