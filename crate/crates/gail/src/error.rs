use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config key `{key}`: {reason}")]
    Config { key: &'static str, reason: String },
    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no expert: the MDP has no eval_reward and no expert checkpoint was given")]
    MissingExpert,
    #[error("invariant violated at iteration {iteration}: {detail}")]
    Invariant { iteration: usize, detail: String },
    #[error(transparent)]
    Core(#[from] gail_core::Error),
}

impl CliError {
    pub fn config(key: &'static str, reason: impl Into<String>) -> Self {
        CliError::Config {
            key,
            reason: reason.into(),
        }
    }

    pub fn parse(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        CliError::Parse {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
