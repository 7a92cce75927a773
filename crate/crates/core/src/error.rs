use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("timestep {t} out of range for schedule of length {len}")]
    Timestep { t: usize, len: usize },

    #[error("step from t={0} has no previous timestep")]
    NoPreviousStep(usize),

    #[error("alpha_bar at t={0} is numerically zero; x0 cannot be recovered")]
    DegenerateAlphaBar(usize),

    #[error("no corpus point carries token {0}")]
    EmptyCondition(u32),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("corpus has {n} candidates but the metric needs {k}")]
    CorpusTooSmall { n: usize, k: usize },

    #[error("embedding metric requested but no embedding is configured")]
    MissingEmbedding,

    #[error("mixed metric kinds in one report")]
    MixedMetrics,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid {field}: {reason}")]
    Invalid { field: String, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {reason}")]
    Parse { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

pub(crate) fn io_err(path: &std::path::Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

impl Error {
    /// Errors caused by the user's configuration rather than by a run going wrong.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Invalid { .. }
                | Error::Parse { .. }
                | Error::EmptyCondition(_)
                | Error::MissingEmbedding
                | Error::CorpusTooSmall { .. }
        )
    }
}
