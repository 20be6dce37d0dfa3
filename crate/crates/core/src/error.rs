//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A constructor or solver argument violates its domain constraint.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A dense linear solve hit a singular (or numerically singular) matrix.
    #[error("singular linear system in {0}")]
    Singular(&'static str),

    /// The generator has more than one recurrent class: during state
    /// elimination the named state had no transitions to lower-numbered
    /// states, so a unique stationary distribution does not exist.
    #[error("reducible generator: state {index} ({label}) cannot reach lower states")]
    ReducibleChain { index: usize, label: String },

    /// Bisection was asked for a target outside the bracket values.
    #[error("bisection target {target} outside bracket: f(lo)={f_lo}, f(hi)={f_hi}")]
    TargetOutsideBracket { target: f64, f_lo: f64, f_hi: f64 },

    /// A fixed-point rate could not be bracketed below the cap; usually a
    /// symptom of a wrong maximum queue level m.
    #[error("no {what} in [{lo}, {hi}] attains the fixed-point target (wrong m?)")]
    FixedPointBracket { what: &'static str, lo: f64, hi: f64 },

    /// Invalid simulation configuration.
    #[error("invalid simulation config: {0}")]
    SimConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
