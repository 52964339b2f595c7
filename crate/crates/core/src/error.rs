use thiserror::Error;

/// Errors raised by the solver library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid box: lower bound {lo} is not below upper bound {hi} in component {index}")]
    InvalidBox { index: usize, lo: f64, hi: f64 },

    #[error("sample count must be at least 1")]
    EmptySampleSet,

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("homotopy parameter t = {0} is outside [0, 1]")]
    TOutOfRange(f64),

    #[error("t = {t} is outside segment {segment} = [{lo}, {hi}]")]
    OutsideSegment {
        segment: usize,
        t: f64,
        lo: f64,
        hi: f64,
    },

    #[error("group index {index} exceeds number of groups {groups}")]
    GroupOutOfRange { index: usize, groups: usize },

    #[error("non-finite residual at sample {sample}")]
    NonFiniteResidual { sample: usize },

    #[error("model evaluation failed at sample {sample}: {source}")]
    Model {
        sample: usize,
        #[source]
        source: ModelError,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("reference point is not strictly inside the domain box")]
    ReferenceNotInterior,

    #[error("singular Jacobian at t = {t} (|u| = {u_norm:.6e})")]
    SingularJacobian { t: f64, u_norm: f64 },

    #[error("invalid tracer configuration: {0}")]
    InvalidTraceConfig(String),

    #[error("reference solve did not converge: {0}")]
    Oracle(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

/// Failure of a single-sample residual or Jacobian evaluation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("non-positive price p[{index}] = {value}")]
    NonPositivePrice { index: usize, value: f64 },

    #[error("non-finite value")]
    NonFinite,
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
