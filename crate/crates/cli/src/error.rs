use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] mel_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Config(String),
    #[error("stage {stage} needs {path}, which does not exist")]
    MissingInput { stage: String, path: PathBuf },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        use mel_core::Error as E;
        match self {
            CliError::Core(e) => match e {
                E::Io { .. } => "io",
                E::Parse { .. } => "parse",
                E::Config(_) | E::VocabTooSmall { .. } => "config",
                E::Checkpoint(_) => "checkpoint",
                E::QuerySetMismatch => "query-set-mismatch",
                E::UnknownEntity(_) | E::Unencodable(_) | E::NoDescription(_) | E::DuplicateQid(_) => "data",
                _ => "numeric",
            },
            CliError::Io { .. } => "io",
            CliError::Config(_) => "config",
            CliError::MissingInput { .. } => "missing-input",
        }
    }

    /// One line: `error kind=<kind> [path=<path>] message=<text>`.
    pub fn machine_line(&self) -> String {
        let path = match self {
            CliError::MissingInput { path, .. } | CliError::Io { path, .. } => {
                format!(" path={}", path.display())
            }
            _ => String::new(),
        };
        let message = self.to_string().replace('\n', " ");
        format!("error kind={}{} message={}", self.kind(), path, message)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
