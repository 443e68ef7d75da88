//! Desk-scale toolkit for measuring cross-lingual PII leakage in a small
//! transformer and locating and editing the neurons that carry it.

pub mod corpus;
pub mod error;
pub mod intervene;
pub mod lens;
pub mod metrics;
pub mod neurons;
pub mod nn;
pub mod pipeline;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type ModelF32 = nn::TransformerModel<f32>;
pub type ModelF64 = nn::TransformerModel<f64>;
pub type MatrixF32 = nn::Matrix<f32>;
pub type MatrixF64 = nn::Matrix<f64>;
