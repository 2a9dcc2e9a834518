use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: output would be empty ({detail})")]
    EmptyOutput { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward called on a value that is not connected to any gradient")]
    Detached,

    #[error("backward requires a scalar loss, got {0} elements")]
    NonScalarLoss(usize),

    #[error("epoch {epoch} outside schedule range 0..{total}")]
    EpochOutOfRange { epoch: usize, total: usize },

    #[error("stage {stage}: spatial size {size} cannot be halved by the broad cell")]
    SpatialUnderflow { stage: usize, size: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid genotype: {0}")]
    Genotype(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code used by the command-line front end: 2 for bad
    /// configurations or genotypes, 3 for unreadable data, 1 for failures
    /// during the numeric work itself.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Genotype(_) | Error::Shape { .. } | Error::SpatialUnderflow { .. } => 2,
            Error::Data(_) | Error::Io { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
