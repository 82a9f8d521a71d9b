//! Cascaded multi-layer convolutional sparse coding decoder for image
//! segmentation.

pub mod autodiff;
pub mod checks;
pub mod data;
pub mod error;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod mlblock;
pub mod rng;
pub mod segnet;
pub mod tensor;
pub mod training;

pub use error::{Error, Result, ShapeError};
pub use tensor::{DType, Mode, Scalar, Tensor};
