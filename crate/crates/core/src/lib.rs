pub mod autodiff;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod fields;
pub mod formats;
pub mod geometry;
pub mod interp;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod render;
pub mod scalar;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Tape64 = autodiff::Tape<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tensor32 = autodiff::Tensor<f32>;
pub type Camera64 = geometry::Camera<f64>;
pub type Camera32 = geometry::Camera<f32>;
pub type Bounds64 = geometry::Bounds<f64>;
pub type Bounds32 = geometry::Bounds<f32>;
pub type Ray64 = geometry::Ray<f64>;
pub type Ray32 = geometry::Ray<f32>;
pub type MlpParams64 = fields::MlpParams<f64>;
pub type MlpParams32 = fields::MlpParams<f32>;
pub type RayBatch64 = render::RayBatch<f64>;
pub type RayBatch32 = render::RayBatch<f32>;
