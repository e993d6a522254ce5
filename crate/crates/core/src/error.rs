use std::path::PathBuf;

/// Crate-wide error type.
///
/// Variants are grouped by whether they indicate invalid input (rejected by a
/// precondition) or a runtime failure; the CLI maps the former to exit code 1
/// and the latter to exit code 2.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value at element {index}{}", context.as_deref().map(|c| format!(" ({c})")).unwrap_or_default())]
    NonFinite {
        index: usize,
        context: Option<String>,
    },

    #[error("{path}: header/raw size mismatch: header implies {expected} bytes, raw file has {actual}")]
    SizeMismatch {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("malformed json in {path}: {message}")]
    Json { path: PathBuf, message: String },

    #[error("label {label} out of range for {num_classes} classes at voxel {index}")]
    LabelOutOfRange {
        label: u8,
        num_classes: u8,
        index: usize,
    },

    #[error("hausdorff distance undefined: {0} boundary set is empty")]
    EmptySet(&'static str),

    #[error("field inversion diverged after {iterations} iterations; residual trace: {trace:?}")]
    InversionDiverged { iterations: usize, trace: Vec<f64> },

    #[error("checkpoint parameter mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("training diverged (non-finite loss) at epoch {epoch}, step {step}")]
    TrainingDiverged { epoch: usize, step: usize },
}

impl Error {
    /// True for errors caused by invalid inputs or configuration, as opposed
    /// to runtime failures such as i/o or divergence.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Invalid(_)
                | Error::ShapeMismatch(_)
                | Error::LabelOutOfRange { .. }
                | Error::EmptySet(_)
                | Error::CheckpointMismatch(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
