//! A small, self-contained laboratory for binary image segmentation:
//! a reverse-mode autodiff tape with exactly the operations a 4-level
//! U-Net needs, builders for the plain and multi-resolution variants,
//! soft-Dice training with Adadelta, a PNG/PNM data pipeline, and the
//! evaluation statistics used to compare the two architectures.

pub mod augment;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod stats;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
