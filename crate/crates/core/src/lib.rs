//! Adaptive graph convolutional networks for multi-label classification,
//! with a domain-adversarial extension for unsupervised domain adaptation.
//!
//! The numeric core ([`numgrad`], [`labelgraph`], [`model`], [`losses`],
//! [`metrics`]) is generic over [`Scalar`] (`f32` or `f64`); datasets and the
//! training harness work in `f64`.

pub mod datakit;
pub mod error;
pub mod labelgraph;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numgrad;
pub mod runkit;
pub mod scalar;

pub use error::{Error, Result};
pub use labels::LabelMatrix;
pub use scalar::Scalar;

/// Double-precision dense matrix.
pub type Matrix = numgrad::DenseMatrix<f64>;
/// Double-precision autodiff tape.
pub type Tape64 = numgrad::Tape<f64>;
/// Single-precision autodiff tape.
pub type Tape32 = numgrad::Tape<f32>;
/// Double-precision model.
pub type Model = model::ModelBundle<f64>;
