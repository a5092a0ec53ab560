use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("map is not invertible: {0}")]
    NotInvertible(String),

    #[error("causal variable {0} has no assigned latent dimensions")]
    EmptyAssignment(usize),

    #[error("intervention target {0} is degenerate (all samples share one label)")]
    DegenerateTarget(usize),

    #[error("variance is zero, quantity undefined: {0}")]
    UndefinedVariance(String),

    #[error("input is constant, ranks undefined")]
    UndefinedRank,

    #[error("sequence lengths are misaligned: {0}")]
    Misaligned(String),

    #[error("stitch plan keeps no latent blocks")]
    EmptyPlan,

    #[error("io: {0}")]
    Io(String),

    #[error("parse: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn dim(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected,
            actual,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn ensure_dim(context: &str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::dim(context, expected, actual))
    }
}
