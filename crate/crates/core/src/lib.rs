//! Training, evaluation and data-parallel scaling engine for dual-modality
//! (page image + extracted text) document classification.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
