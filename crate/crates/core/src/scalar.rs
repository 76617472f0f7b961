//! Scalar element types and the fast/reference precision modes.
//!
//! All numerics are generic over [`Scalar`], instantiated as `f64` in
//! reference mode (the default, used by every tolerance-bearing test) and
//! `f32` in fast mode. The mode is selected by the `SEQFN_MODE` environment
//! variable.

use std::fmt;

/// Environment variable selecting the precision mode.
pub const MODE_ENV: &str = "SEQFN_MODE";

/// Float element type for tensors and parameters.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssignOps + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// Human-readable mode label ("reference" / "fast").
    const MODE_NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// Widen from a checkpoint payload element.
    fn from_f32(v: f32) -> Self;
    /// Narrow to a checkpoint payload element.
    fn to_f32(self) -> f32;
}

impl Scalar for f64 {
    const MODE_NAME: &'static str = "reference";

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
}

impl Scalar for f32 {
    const MODE_NAME: &'static str = "fast";

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f32(self) -> f32 {
        self
    }
}

/// Precision mode: 64-bit reference (default) or 32-bit fast.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Fast,
    Reference,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Mode> {
        match s {
            "fast" => Some(Mode::Fast),
            "reference" => Some(Mode::Reference),
            _ => None,
        }
    }

    /// Resolve from `SEQFN_MODE`; unset means reference.
    pub fn from_env() -> Result<Mode, String> {
        match std::env::var(MODE_ENV) {
            Ok(v) => Mode::parse(&v)
                .ok_or_else(|| format!("{MODE_ENV} must be \"fast\" or \"reference\", got {v:?}")),
            Err(_) => Ok(Mode::Reference),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Fast => "fast",
            Mode::Reference => "reference",
        }
    }
}
