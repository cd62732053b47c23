use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the refinement engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("unsupported dtype {0:?} (expected '<f4' or '<f8')")]
    UnsupportedDtype(String),

    #[error("fortran_order arrays are not supported")]
    FortranOrder,

    #[error("shape overflow: {0:?} does not fit in memory")]
    ShapeOverflow(Vec<usize>),

    #[error("degenerate prototype: class {class}, region {region} has no reliable pixels")]
    DegeneratePrototype { class: usize, region: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty training set: {0}")]
    EmptyTrainingSet(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("scenario generation failed after {0} attempts: cup not inside disc")]
    DegenerateGeometry(usize),

    #[error("missing input {path}: {reason}")]
    MissingInput { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], found: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            found: found.to_vec(),
        }
    }

    /// Stable machine-readable name of the innermost error.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidTensor(_) => "invalid_tensor",
            Error::MalformedHeader(_) => "malformed_header",
            Error::UnsupportedDtype(_) => "unsupported_dtype",
            Error::FortranOrder => "fortran_order",
            Error::ShapeOverflow(_) => "shape_overflow",
            Error::DegeneratePrototype { .. } => "degenerate_prototype",
            Error::Config(_) => "config",
            Error::EmptyTrainingSet(_) => "empty_training_set",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::DegenerateGeometry(_) => "degenerate_geometry",
            Error::MissingInput { .. } => "missing_input",
            Error::File { source, .. } => source.kind(),
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    /// The outermost file the error is attributed to.
    pub fn path(&self) -> Option<&std::path::Path> {
        match self {
            Error::File { path, .. } | Error::MissingInput { path, .. } => Some(path),
            _ => None,
        }
    }

    /// Attaches the file the error originated from.
    pub fn in_file(self, path: impl Into<PathBuf>) -> Self {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
