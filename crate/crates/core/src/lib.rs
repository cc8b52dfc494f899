//! Elastic CNN engine: structured channel pruning driven by dependency
//! groups, compact core extraction, and nested rebuilding of larger models
//! around a frozen core.

pub mod autodiff;
pub mod depgraph;
pub mod elastic;
pub mod error;
pub mod graph;
pub mod importance;
pub mod parallel;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
