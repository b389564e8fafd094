//! Small-CNN training with an optional background class, plus class activation
//! maps and deep feature factorization for inspecting what the model attends to.

pub mod autodiff;
pub mod background;
pub mod cam;
pub mod datasets;
pub mod dff;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod model;
pub mod raster;
pub mod seed;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
