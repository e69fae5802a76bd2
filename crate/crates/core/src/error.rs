use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the pipeline can report.
///
/// Each variant maps onto a stable machine-readable code (see [`Error::code`])
/// that the CLI prints on standard error and the C ABI returns as an integer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch on axis {axis} in {op}: {detail}")]
    Dimension {
        op: &'static str,
        axis: String,
        detail: String,
    },
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unsupported op `{0}`")]
    UnsupportedOp(String),
    #[error("parameter registry error: {0}")]
    Registry(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("infeasible assignment: {gts} ground truths but only {queries} queries")]
    Infeasible { gts: usize, queries: usize },
    #[error("statistics error: {0}")]
    Statistics(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("malformed image header in {path}: {detail}")]
    ImageHeader { path: PathBuf, detail: String },
    #[error("image pairing error: {0}")]
    Pairing(String),
    #[error("image extent {height}x{width} is not divisible by 64")]
    Extent { height: usize, width: usize },
    #[error("malformed tensor file: {0}")]
    TensorFormat(String),
    #[error("malformed dataset: {0}")]
    Dataset(String),
    #[error("training diverged at step {step}: loss is not finite")]
    Divergence { step: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable identifier printed by the CLI as `error[<code>]`.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "E_DIMENSION",
            Error::Shape { .. } => "E_SHAPE",
            Error::Config(_) => "E_CONFIG",
            Error::UnsupportedOp(_) => "E_UNSUPPORTED_OP",
            Error::Registry(_) => "E_REGISTRY",
            Error::Argument(_) => "E_ARGUMENT",
            Error::Infeasible { .. } => "E_INFEASIBLE",
            Error::Statistics(_) => "E_STATISTICS",
            Error::Numeric(_) => "E_NUMERIC",
            Error::ImageHeader { .. } => "E_IMAGE_HEADER",
            Error::Pairing(_) => "E_PAIRING",
            Error::Extent { .. } => "E_EXTENT",
            Error::TensorFormat(_) => "E_TENSOR_FORMAT",
            Error::Dataset(_) => "E_DATASET",
            Error::Divergence { .. } => "E_DIVERGENCE",
            Error::Io { .. } => "E_IO",
        }
    }

    /// Numeric status shared by the process exit code and the C ABI.
    pub fn status(&self) -> i32 {
        match self {
            Error::Dimension { .. } => 10,
            Error::Shape { .. } => 11,
            Error::Config(_) => 12,
            Error::UnsupportedOp(_) => 13,
            Error::Registry(_) => 14,
            Error::Argument(_) => 15,
            Error::Infeasible { .. } => 16,
            Error::Statistics(_) => 17,
            Error::Numeric(_) => 18,
            Error::ImageHeader { .. } => 20,
            Error::Pairing(_) => 21,
            Error::Extent { .. } => 22,
            Error::TensorFormat(_) => 23,
            Error::Dataset(_) => 24,
            Error::Divergence { .. } => 30,
            Error::Io { .. } => 40,
        }
    }

    pub(crate) fn dim(op: &'static str, axis: impl ToString, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            axis: axis.to_string(),
            detail: detail.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
