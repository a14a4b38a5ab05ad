use std::path::PathBuf;

use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("configuration has {} problem(s): {}", .0.len(), .0.join("; "))]
    Config(Vec<String>),
    #[error("missing prerequisite artifact {} (produced by `{stage}`)", path.display())]
    MissingArtifact { path: PathBuf, stage: &'static str },
    #[error(transparent)]
    Core(#[from] learngene::Error),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::MissingArtifact { .. } => 4,
            CliError::Core(_) | CliError::Runtime(_) => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::MissingArtifact { .. } => "missing_artifact",
            CliError::Core(_) | CliError::Runtime(_) => "runtime",
        }
    }

    /// One line of JSON for stderr.
    pub fn to_json_line(&self) -> String {
        let mut v = json!({
            "error": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        });
        match self {
            CliError::Config(problems) => v["problems"] = json!(problems),
            CliError::MissingArtifact { path, .. } => v["path"] = json!(path.display().to_string()),
            _ => {}
        }
        v.to_string()
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
