//! Crate-wide error type.
//!
//! Errors distinguish contract violations (caller bugs: bad dimensions,
//! invalid parameters) from numerical failure states that a caller may want
//! to report rather than fix (rank deficiency, conditioning, weight
//! collapse, path divergence).

use thiserror::Error;

/// Errors produced by filters, geometry and experiment drivers.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller violated a documented precondition (dimension mismatch,
    /// negative delta, zero proposal density, ...).
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// A matrix required to have full row rank does not, within the rank
    /// tolerance. Carries the offending time index when raised by a filter.
    #[error("rank deficiency: {0}")]
    RankDeficient(String),

    /// A matrix required to be symmetric positive definite failed its
    /// factorization beyond the documented clamping band.
    #[error("numerical conditioning: {0}")]
    Conditioning(String),

    /// An operation that only exists for positive observation noise was
    /// called at delta = 0 (or vice versa).
    #[error("unsupported parameterization: {0}")]
    Unsupported(String),

    /// Every particle carries log-weight -inf. `time` is the filter step
    /// when known.
    #[error("weight collapse{}: all log-weights are -inf", fmt_time(.time))]
    WeightCollapse { time: Option<usize> },

    /// A guided path produced a non-finite state at the given Euler step.
    #[error("path divergence at substep {step}: non-finite state")]
    PathDivergence { step: usize },

    /// Configuration file rejected (bad schema, inconsistent fields).
    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn fmt_time(time: &Option<usize>) -> String {
    match time {
        Some(n) => format!(" at step {n}"),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, Error>;
