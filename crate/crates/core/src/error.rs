use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    DimensionMismatch { expected: usize, got: usize },
    InvalidSpec(String),
    EmptyInterior,
    TooManyFacets { dim: usize },
    NotStrictlyFeasible,
    Infeasible,
    Unbounded,
    NotConverged { iterations: usize, residual: f64 },
    DegenerateJacobian,
    Geometry(String),
    Config(String),
    Io(String),
    FeasibilityViolation { step: usize, excess: f64 },
    InvalidAction(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            Error::InvalidSpec(msg) => write!(f, "invalid constraint spec: {msg}"),
            Error::EmptyInterior => write!(f, "feasible set has empty interior"),
            Error::TooManyFacets { dim } => {
                write!(f, "sign-pattern expansion refused for dimension {dim} (max 8)")
            }
            Error::NotStrictlyFeasible => write!(f, "anchor point is not strictly feasible"),
            Error::Infeasible => write!(f, "problem is infeasible"),
            Error::Unbounded => write!(f, "problem is unbounded"),
            Error::NotConverged { iterations, residual } => write!(
                f,
                "solver did not converge after {iterations} iterations (residual {residual:e})"
            ),
            Error::DegenerateJacobian => write!(f, "degenerate active set; jacobian undefined"),
            Error::Geometry(msg) => write!(f, "geometry error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Io(msg) => write!(f, "io error: {msg}"),
            Error::FeasibilityViolation { step, excess } => {
                write!(f, "infeasible action at step {step} (excess {excess:e})")
            }
            Error::InvalidAction(msg) => write!(f, "invalid action: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
