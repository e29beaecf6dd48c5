pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod glam;
pub mod gradcheck;
pub mod model;
pub mod nlu;
pub mod nn;
pub mod rng;
pub mod study;
pub mod tensor;
pub mod train;
pub mod windowing;

pub use error::{GlamError, Result};
pub use tensor::{no_grad, Precision, Scalar, Tensor};
