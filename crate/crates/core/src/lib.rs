//! Refinement of dense object-detection proposals by relabeling,
//! rescoring and suppression.

pub mod bfnet;
pub mod datagen;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod netcore;
pub mod r2snet;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::{DType, Precision, Quad, Scalar, Storable};

/// Single-precision instantiations used by the fast path.
pub type Tensor32 = netcore::Tensor<f32>;
pub type ParamSet32 = netcore::ParamSet<f32>;
pub type Model32 = r2snet::Model<f32>;
pub type Checkpoint32 = training::Checkpoint<f32>;
pub type TrainImage32 = training::TrainImage<f32>;

/// Double-precision instantiations used by test mode.
pub type Tensor64 = netcore::Tensor<f64>;
pub type ParamSet64 = netcore::ParamSet<f64>;
pub type Model64 = r2snet::Model<f64>;
pub type Checkpoint64 = training::Checkpoint<f64>;
pub type TrainImage64 = training::TrainImage<f64>;
