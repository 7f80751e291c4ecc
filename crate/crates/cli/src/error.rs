use std::path::{Path, PathBuf};

use thiserror::Error;

/// Failure of a CLI run, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad or missing configuration. `key` is the dotted path of the culprit.
    #[error("config error at `{key}`: {reason}")]
    Config { key: String, reason: String },

    /// The run diverged or an integration failed.
    #[error("numeric failure: {0}")]
    Numeric(qsr_core::Error),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        CliError::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Maps a core error raised while handling config section `section`
    /// (empty for top-level keys).
    pub fn from_core(e: qsr_core::Error, section: &str) -> Self {
        if e.is_numeric() {
            return CliError::Numeric(e);
        }
        let join = |name: &str| {
            if section.is_empty() {
                name.to_string()
            } else {
                format!("{section}.{name}")
            }
        };
        let key = match &e {
            qsr_core::Error::InvalidParameter { name, .. } => join(name),
            qsr_core::Error::Shape { what, .. } => join(what),
            _ if section.is_empty() => "config".to_string(),
            _ => section.to_string(),
        };
        CliError::config(key, e.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Numeric(_) => 3,
            CliError::Io { .. } => 4,
        }
    }
}
