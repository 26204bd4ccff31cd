use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A caller broke an operation's precondition (wrong tape mode,
    /// non-scalar output where a gradient is requested, ...).
    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// The pseudo-time equilibrium is only reached as `t -> inf`.
    #[error("pseudo-time {tau} equals the target and maps to infinite time")]
    InfiniteTime { tau: f64 },

    #[error("singular evaluation: {0}")]
    Singularity(String),

    #[error("degenerate covariance: {0}")]
    DegenerateCovariance(String),

    /// Invalid configuration, naming the offending field.
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("numeric fault in {context}: {detail}")]
    NumericFault { context: String, detail: String },

    #[error("trajectory diverged at t = {time} (|x| = {norm:e})")]
    Divergence { time: f64, norm: f64 },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: &str, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_owned(),
            message: message.into(),
        }
    }

    pub(crate) fn numeric(context: &str, detail: impl Into<String>) -> Self {
        Error::NumericFault {
            context: context.to_owned(),
            detail: detail.into(),
        }
    }

    /// Builds a parse error from a serde_json error, converting its
    /// line/column position into a byte offset within `source`.
    pub fn from_json(err: serde_json::Error, source: &str) -> Self {
        let offset = byte_offset(source, err.line(), err.column());
        Error::Parse {
            offset,
            message: err.to_string(),
        }
    }
}

fn byte_offset(source: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut offset = 0;
    for (i, l) in source.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return offset + column.min(l.len());
        }
        offset += l.len();
    }
    source.len()
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
