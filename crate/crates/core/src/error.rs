use std::path::PathBuf;

use thiserror::Error;

use crate::model::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("action not in A(x): action {action} is not admissible in state {state}")]
    InadmissibleAction { state: usize, action: u32 },

    #[error("invalid model: {}", join_violations(.0))]
    InvalidModel(Vec<Violation>),

    #[error("invalid policy set: {0}")]
    InvalidPolicySet(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("attempt cap of {attempts} exceeded while generating an instance ({reason}); relax the instance spec")]
    AttemptCapExceeded { attempts: usize, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed toml: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Validation failures map to exit code 1 on the command line, everything else to 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidModel(_)
                | Error::InvalidPolicySet(_)
                | Error::InadmissibleAction { .. }
                | Error::Json(_)
                | Error::Toml(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}
