//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OclError {
    /// Invalid configuration, spec, or precondition violation discoverable
    /// before any work starts.
    #[error("configuration error: {0}")]
    Config(String),

    /// Mismatched dimensions or lengths between related inputs.
    #[error("shape error: {0}")]
    Shape(String),

    /// Non-finite values encountered mid-computation.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A query point falls outside the cell tree's root region.
    #[error("point ({lat}, {lon}) lies outside the cell tree region")]
    OutOfRegion { lat: f64, lon: f64 },

    /// A checkpoint or serialized artifact failed to parse back.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Runs being compared are not apples-to-apples.
    #[error("comparison error: {0}")]
    Comparison(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, OclError>;

impl OclError {
    pub fn config(msg: impl Into<String>) -> Self {
        OclError::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        OclError::Shape(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        OclError::Numerical(msg.into())
    }

    pub fn integrity(msg: impl Into<String>) -> Self {
        OclError::Integrity(msg.into())
    }

    pub fn comparison(msg: impl Into<String>) -> Self {
        OclError::Comparison(msg.into())
    }
}
