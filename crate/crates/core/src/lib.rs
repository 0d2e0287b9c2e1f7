//! Orthogonal temporal interpolation for zero-shot video recognition.
//!
//! The crate implements the full pipeline on a desk-scale synthetic benchmark:
//!
//! * [`tensor`] / [`rng`] / [`autodiff`] — double-precision dense tensors,
//!   seeded substreams, and a tape-based gradient evaluator.
//! * [`geometry`] — projection / orthogonal-residual factorization of a
//!   spatial-temporal feature against the spatial feature, plus the λ
//!   interpolation that builds the refined feature.
//! * [`temporal`] — the trainable temporal transformer over frozen frame
//!   embeddings with average pooling and an optional residual connection.
//! * [`category`] / [`corpus`] — a frozen semantic-embedding bank with
//!   disjoint seen/unseen partitions, and a generator for "temporal twin"
//!   videos whose categories are separable only through frame order.
//! * [`objectives`] / [`trainer`] — the three-term loss (classification,
//!   refined-feature classification, matching MSE) and an AdamW training
//!   loop with a finite-difference gradient checker.
//! * [`evaluator`] — zero-shot inference, the full / random-half / subset
//!   evaluation protocols, feature-variant tables, λ sweeps, and angle
//!   diagnostics.

pub mod autodiff;
pub mod category;
pub mod corpus;
pub mod evaluator;
pub mod geometry;
pub mod objectives;
pub mod rng;
pub mod ser;
pub mod temporal;
pub mod tensor;
pub mod trainer;

pub use crate::rng::{seeded_stream, RngStream};
pub use crate::tensor::Tensor;

/// Error type shared by every module in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),
    /// A value left the numeric domain (NaN/Inf where finiteness is required).
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A vector with (near-)zero norm where a direction is required.
    #[error("degenerate vector: {0}")]
    Degenerate(String),
    /// An argument violates its documented range or consistency constraint.
    #[error("parameter error: {0}")]
    Parameter(String),
    /// A persisted file does not conform to its schema.
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }
    pub(crate) fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }
    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
