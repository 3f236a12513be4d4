use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unsupported configuration: {0}")]
    UnsupportedConfiguration(String),

    #[error("row {row} of the weights matrix has no finite entries")]
    DegenerateRow { row: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("spatial process is unstable: {0}")]
    Stability(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("design matrix is rank deficient: {0}")]
    SingularDesign(String),

    #[error("degenerate treatment: {0}")]
    DegenerateTreatment(String),

    #[error("estimation failed: {0}")]
    EstimationFailure(String),

    #[error("training diverged at epoch {epoch}, batch {batch} (last finite loss {last_finite_loss:?})")]
    TrainingFailure {
        epoch: usize,
        batch: usize,
        last_finite_loss: Option<f64>,
    },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("bootstrap unstable: {failed} of {total} iterations failed; first failure: {first_failure}")]
    BootstrapUnstable {
        failed: usize,
        total: usize,
        first_failure: String,
    },

    #[error("scenario failed: {failed} of {total} replications failed; first failure: {first_failure}")]
    ScenarioFailure {
        failed: usize,
        total: usize,
        first_failure: String,
    },

    #[error("size limit exceeded: {0}")]
    SizeLimit(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
