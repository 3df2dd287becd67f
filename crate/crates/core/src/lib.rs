//! Desk-scale laboratory for reasoning-guided ranking alignment in dense
//! document retrieval.
//!
//! The numerical core ([`mathkernel`], [`encoder`], [`objective`]) is generic
//! over [`Scalar`]; training, evaluation and diagnostics run in `f64` via the
//! aliases below.

pub mod corpus;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod evalsuite;
pub mod harness;
pub mod mathkernel;
pub mod objective;
pub mod oracle;
pub mod scalar;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
pub use scalar::Scalar;

pub type Vector64 = mathkernel::Vector<f64>;
pub type Vector32 = mathkernel::Vector<f32>;
pub type Probabilities64 = mathkernel::ProbabilityVector<f64>;
pub type Matrix64 = mathkernel::Matrix<f64>;
pub type Params64 = encoder::EncoderParams<f64>;
pub type Params32 = encoder::EncoderParams<f32>;
pub type Batch64 = objective::BatchScores<f64>;
pub type Losses64 = objective::LossBreakdown<f64>;
