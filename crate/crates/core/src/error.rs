use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("layout mismatch at segment `{segment}`")]
    LayoutMismatch { segment: String },

    #[error("non-finite function value at probe index {index}")]
    NonFinite { index: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("inner descent produced a non-finite loss at step {step}")]
    InnerDiverged { step: usize },

    #[error("Q^b not positive definite; increase gamma (curvature {curvature:e} at CG iteration {iteration})")]
    NotPositiveDefinite { iteration: usize, curvature: f64 },

    #[error("Riccati iteration did not converge in {iterations} iterations (last change {change:e})")]
    DareNotConverged { iterations: usize, change: f64 },

    #[error("simulator produced a non-finite state at step {step}")]
    PlantBlowUp { step: usize },

    #[error("dataset too short: need {needed} samples, have {available}")]
    DatasetTooShort { needed: usize, available: usize },

    #[error("task {index}: {source}")]
    Task {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed data file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            Error::Task { source, .. } => source.exit_code(),
            Error::NonFinite { .. }
            | Error::InnerDiverged { .. }
            | Error::NotPositiveDefinite { .. }
            | Error::DareNotConverged { .. }
            | Error::PlantBlowUp { .. } => 3,
            _ => 1,
        }
    }

    pub(crate) fn in_task(self, index: usize) -> Self {
        Error::Task {
            index,
            source: Box::new(self),
        }
    }
}
