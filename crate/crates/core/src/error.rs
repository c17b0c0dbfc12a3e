use thiserror::Error;

pub type Result<T> = std::result::Result<T, EivError>;

#[derive(Debug, Error)]
pub enum EivError {
    #[error("dimension mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite value at flat index {index} in {context}")]
    NonFinite { context: String, index: usize },

    /// Argument outside the mathematical domain of an operation (e.g. sigma <= 0).
    #[error("domain error: {0}")]
    Domain(String),

    /// Precondition on call order or sizes violated by the caller.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(
        "non-finite loss at epoch {epoch}, batch {batch} \
         (|theta|^2 = {param_sq_norm}, log sigma_y^2 = {log_sigma_y_sq})"
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        param_sq_norm: f64,
        log_sigma_y_sq: f64,
    },

    #[error("{path}: row {row}, column {column}: {message}")]
    Parse {
        path: String,
        row: usize,
        column: String,
        message: String,
    },

    #[error("model file: {0}")]
    Format(String),

    #[error("run with seed {seed} failed: {source}")]
    RunFailed {
        seed: u64,
        #[source]
        source: Box<EivError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl EivError {
    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        EivError::Shape {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
