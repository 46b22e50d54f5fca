pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod heatmap;
pub mod image_io;
pub mod loss;
pub mod model;
pub mod ops;
pub mod preprocess;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
