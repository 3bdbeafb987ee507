use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("provenance error: {0}")]
    Provenance(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("unsupported generator variant: {0}")]
    UnsupportedVariant(String),

    #[error("failed to load `{field}`: {reason}")]
    Load { field: String, reason: String },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn load(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Load {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }

    /// Errors caused by bad inputs or configuration rather than a failed run.
    pub fn is_configuration(&self) -> bool {
        match self {
            Error::Config(_)
            | Error::Invariant(_)
            | Error::Provenance(_)
            | Error::Input(_)
            | Error::UnsupportedVariant(_)
            | Error::Load { .. }
            | Error::Json(_)
            | Error::Toml(_) => true,
            Error::Stage { source, .. } => source.is_configuration(),
            Error::UndefinedMetric(_) | Error::Divergence(_) | Error::Io { .. } => false,
        }
    }
}
