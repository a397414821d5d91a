use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (last jitter tried: {jitter:e})")]
    SingularMatrix { jitter: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("variational scale v_{index} = {value} must be strictly positive")]
    NonPositiveV { index: usize, value: f64 },

    #[error("row index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("minibatch is empty")]
    EmptyBatch,

    #[error("count observation {0} is negative")]
    NegativeCount(f64),

    #[error("count observation {0} is not an integer")]
    InvalidCount(f64),

    #[error("requested {requested} inducing points but only {available} data points")]
    MTooLarge { requested: usize, available: usize },

    #[error("exact GP refuses N = {n} (limit {limit})")]
    TooLarge { n: usize, limit: usize },

    #[error("objective is not finite at step {step}")]
    NonFiniteObjective {
        step: usize,
        last: Option<Box<crate::trainer::FitResult>>,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code for the command-line front end:
    /// 1 configuration, 2 numerical failure, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidParameter(_) | Error::MTooLarge { .. } => 1,
            Error::Json(e) if !e.is_io() => 1,
            Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_)
            | Error::Parse(_)
            | Error::EmptyDataset => 3,
            _ => 2,
        }
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(Error::Config("x".into()).exit_code(), 1);
        assert_eq!(
            Error::MTooLarge {
                requested: 5,
                available: 2
            }
            .exit_code(),
            1
        );
        let bad_json = serde_json::from_str::<f64>("{").unwrap_err();
        assert_eq!(Error::Json(bad_json).exit_code(), 1);
        let io = std::io::Error::new(std::io::ErrorKind::NotFound, "gone");
        assert_eq!(Error::Io(io).exit_code(), 3);
        assert_eq!(Error::EmptyDataset.exit_code(), 3);
        assert_eq!(Error::SingularMatrix { jitter: 1e-3 }.exit_code(), 2);
        assert_eq!(
            Error::NonFiniteObjective {
                step: 4,
                last: None
            }
            .exit_code(),
            2
        );
        assert_eq!(
            Error::NonPositiveV {
                index: 0,
                value: 0.0
            }
            .exit_code(),
            2
        );
    }
}
