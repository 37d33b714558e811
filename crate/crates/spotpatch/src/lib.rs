//! Parameter-efficient model patching: 1-bit masked weight transforms with
//! learned per-layer gates, a bit-exact patch container, footprint
//! accounting, and a detection-decathlon benchmark harness on synthetic
//! shape-detection tasks.

pub mod autodiff;
pub mod data;
pub mod decathlon;
pub mod error;
pub mod eval;
pub mod format;
pub mod losses;
pub mod patching;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
