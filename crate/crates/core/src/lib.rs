//! Structure-learnable adapter fine-tuning on a frozen transformer encoder.

pub mod adapter;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod model;
pub mod optim;
pub mod params;
pub mod router;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
