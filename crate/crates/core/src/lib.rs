//! Monocular visual odometry with a self-attention encoder: SE(3) algebra,
//! the network and its loss, KITTI ingestion, training, the relative-error
//! benchmark and integrated-gradients attribution.

pub mod attribution;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod fixture;
pub mod labels;
pub mod nn;
pub mod objective;
pub mod plot;
pub mod se3;
pub mod training;
pub mod util;

pub use error::{Error, Result};
