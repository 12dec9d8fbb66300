use std::path::PathBuf;

use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error{}: {message}", field.as_ref().map(|f| format!(" in `{f}`")).unwrap_or_default())]
    Config { field: Option<String>, message: String },

    /// A golden value or an oracle cross-check disagreed.
    #[error("assertion failed: {0}")]
    Mismatch(String),

    #[error("runtime failure: {0}")]
    Runtime(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config {
            field: Some(field.into()),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } => 2,
            Self::Mismatch(_) => 3,
            Self::Runtime(_) | Self::Io { .. } => 4,
        }
    }

    /// One-line JSON error record for stderr.
    pub fn record(&self) -> String {
        let kind = match self {
            Self::Config { .. } => "config",
            Self::Mismatch(_) => "mismatch",
            Self::Runtime(_) => "runtime",
            Self::Io { .. } => "io",
        };
        let field = match self {
            Self::Config { field, .. } => field.clone(),
            _ => None,
        };
        json!({
            "error": kind,
            "field": field,
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        })
        .to_string()
    }
}

impl From<sfdiv::Error> for CliError {
    fn from(e: sfdiv::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
