//! Small dense-network toolkit: layers, batch norm, Adam and LR schedule.

mod adam;
mod batchnorm;
pub mod checkpoint;
mod dense;
mod schedule;

pub use adam::{AdamConfig, AdamState};
pub use batchnorm::{BatchNormCache, BatchNormGrads, BatchNormState, Mode};
pub use dense::{sigmoid, Activation, DenseGrads, DenseLayer, DenseNet, ForwardCache};
pub use schedule::LrSchedule;
