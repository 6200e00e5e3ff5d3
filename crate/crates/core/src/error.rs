use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid grid dimension: {0}")]
    InvalidDimension(String),

    #[error("non-positive living population {value} in cell {cell} where transmission is evaluated")]
    NonPositivePopulation { cell: usize, value: f64 },

    #[error("non-finite state{}", layer.map(|l| format!(" at layer {l}")).unwrap_or_default())]
    NonFiniteState { layer: Option<usize> },

    #[error("implicit solve did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("step {step} failed: {source}")]
    StepFailed {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("snapshot cadence {cadence} is not a positive multiple of step {step}")]
    CadenceMismatch { cadence: f64, step: f64 },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dates are not strictly increasing at row {row}")]
    NonMonotonicDates { row: usize },

    #[error("negative count in row {row}, column {column}")]
    NegativeCount { row: usize, column: String },

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("day-0 living population is zero; cannot normalize")]
    ZeroPopulation,

    #[error("invalid split: train_days {train_days} with {n_days} rows")]
    InvalidSplit { train_days: usize, n_days: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("timestamp mismatch at row {row}: {left} vs {right}")]
    TimestampMismatch { row: usize, left: i64, right: i64 },

    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    DivergedTraining { epoch: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFiniteState { .. }
            | Error::NoConvergence { .. }
            | Error::NonPositivePopulation { .. }
            | Error::NonFiniteGradient { .. }
            | Error::DivergedTraining { .. } => true,
            Error::StepFailed { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        });
    }
    Ok(())
}
