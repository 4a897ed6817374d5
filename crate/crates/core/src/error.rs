use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum DigError {
    #[error("shape mismatch in {op}: expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown field id {field} (encoder has {fields} fields)")]
    UnknownField { field: usize, fields: usize },

    #[error("code {code} out of range at layer {layer} (codebook size {k})")]
    CodeOutOfRange { layer: usize, code: usize, k: usize },

    #[error("collision-free initialization impossible: {items} items exceed {capacity} SIDs")]
    SidSpaceTooSmall { items: usize, capacity: u128 },

    #[error("data error: {0}")]
    Data(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("corrupt artifact {path}: {reason}")]
    Corrupt { path: String, reason: String },

    #[error("unknown ablation variant `{0}`")]
    UnknownVariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = DigError> = std::result::Result<T, E>;

impl DigError {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        DigError::Shape {
            op,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
