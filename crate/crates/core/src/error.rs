use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("numeric fault in {context}{}", layer.map(|l| format!(" (layer {l})")).unwrap_or_default())]
    NumericFault {
        context: String,
        layer: Option<usize>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("stale artifact: {0}")]
    StaleArtifact(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn numeric(context: impl Into<String>, layer: Option<usize>) -> Self {
        Error::NumericFault {
            context: context.into(),
            layer,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    /// Process exit code for the command-line surface.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Validation(_)
            | Error::Generation(_)
            | Error::StaleArtifact(_)
            | Error::UndefinedCorrelation(_) => 2,
            Error::NumericFault { .. } => 3,
            Error::Io { .. } | Error::Format { .. } => 4,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(Error::config("x").exit_code(), 2);
        assert_eq!(Error::validation("x").exit_code(), 2);
        assert_eq!(Error::numeric("forward", Some(1)).exit_code(), 3);
        let io = Error::io("/nope", std::io::Error::other("boom"));
        assert_eq!(io.exit_code(), 4);
        assert_eq!(io.in_stage("stage1").exit_code(), 4);
    }

    #[test]
    fn numeric_fault_mentions_layer() {
        let msg = Error::numeric("forward", Some(3)).to_string();
        assert!(msg.contains("layer 3"), "{msg}");
    }
}
