use std::path::PathBuf;

use crate::ehr::PersonId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    MalformedRow {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("event on line {line} references unknown person {person_id}")]
    UnknownPersonRef { person_id: PersonId, line: u64 },
    #[error("unknown person {0}")]
    UnknownPerson(PersonId),
    #[error("duplicate person {0}")]
    DuplicatePerson(PersonId),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config: {field}: {message}")]
    InvalidConfig { field: String, message: String },
    #[error("both classes are required, got only {0}")]
    SingleClass(&'static str),
    #[error("propensity fit did not converge after {iterations} iterations (gradient norm {gradient_norm:.3e})")]
    NonConvergence { iterations: usize, gradient_norm: f64 },
    #[error("non-finite feature value in column {column}")]
    NonFinite { column: usize },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("model has no recorded node cover; attribution unavailable")]
    MissingCover,
    #[error("all {0} trials failed")]
    AllTrialsFailed(usize),
    #[error("infeasible synthetic config: {0}")]
    InfeasibleConfig(String),
    #[error("missing artifact {path}: run `{stage}` first")]
    MissingArtifact { path: PathBuf, stage: &'static str },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Validation problems (bad config, bad input data, missing upstream
    /// artifacts) as opposed to failures while running a stage.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::MalformedRow { .. }
                | Error::UnknownPersonRef { .. }
                | Error::DuplicatePerson(_)
                | Error::InvalidArgument(_)
                | Error::InvalidConfig { .. }
                | Error::MissingArtifact { .. }
                | Error::InfeasibleConfig(_)
        )
    }
}
