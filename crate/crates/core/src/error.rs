use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("degenerate range: theta_max - theta_min = {width} is below the step floor times k ({floor})")]
    DegenerateRange { width: f64, floor: f64 },

    #[error("symmetric range must be positive, got theta_max = {0}")]
    NonPositiveRange(f64),

    #[error("unsupported bit width {bits} (expected 2..=16)")]
    InvalidBits { bits: u32 },

    #[error("scheme mismatch: {0}")]
    SchemeMismatch(&'static str),

    #[error("non-finite gradient accumulated for learnable {which} (channel {channel})")]
    NonFiniteGradient { which: &'static str, channel: usize },

    #[error("learning-rate policy {policy} is not compatible with parameterization {param}")]
    PolicyMismatch { policy: String, param: String },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

pub type Result<T> = std::result::Result<T, QuantError>;
