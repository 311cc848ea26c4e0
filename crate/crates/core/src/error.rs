use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid argument for {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("non-finite loss at epoch {epoch}, batch {batch}{}", match .checkpoint {
        Some(p) => format!(" (last good checkpoint at {})", p.display()),
        None => String::new(),
    })]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        checkpoint: Option<PathBuf>,
    },

    #[error("gradient check failed: max relative error {max_rel_err:.3e} exceeds tolerance {tol:.3e}")]
    GradCheckFailed { max_rel_err: f64, tol: f64 },

    #[error("checkpoint error at {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("manifest error{}: {detail}", match (.record, .field) {
        (Some(r), Some(f)) => format!(" (record {r}, field `{f}`)"),
        (Some(r), None) => format!(" (record {r})"),
        _ => String::new(),
    })]
    Manifest {
        record: Option<usize>,
        field: Option<&'static str>,
        detail: String,
    },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("gmm fitting failed: {0}")]
    GmmDegenerate(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {detail}")]
    Image { path: PathBuf, detail: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn manifest(detail: impl Into<String>) -> Self {
        Error::Manifest { record: None, field: None, detail: detail.into() }
    }
}
