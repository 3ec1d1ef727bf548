//! Multi-scale temporal adjacency networks for moment localization in video.

pub mod bench;
pub mod error;
pub mod eval;
pub mod io;
pub mod lattice;
pub mod model;
pub mod numerics;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
