//! Recursive weight-tied transformer for single-cell instance segmentation.

pub mod adaptation;
pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod flowfield;
pub mod grid;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
