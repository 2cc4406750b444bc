//! Error types shared across the crate.
//!
//! Every fallible public operation returns [`Result`]. Errors carry enough
//! context to be printed as a single actionable line; the CLI maps each
//! variant to a stable process exit code via [`Error::exit_code`].

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library and the CLI.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad command-line usage or an invalid/unreadable run configuration.
    #[error("config: {0}")]
    Config(String),

    /// Dataset ingestion failed (unreadable file, label mismatch, bad window
    /// parameters, malformed entry).
    #[error("ingest: {0}")]
    Ingest(String),

    /// A compressed stream, container, or checkpoint did not parse.
    #[error("format: {0}")]
    Format(String),

    /// A pipeline stage needs an artifact that has not been produced yet.
    #[error("missing artifact: {path} ({hint})")]
    MissingArtifact { path: PathBuf, hint: String },

    /// Training failed (non-finite loss, empty split, invalid schedule).
    #[error("train: {0}")]
    Train(String),

    /// Invalid argument to a library call (caller bug rather than bad data).
    #[error("invalid input: {0}")]
    Input(String),

    /// Underlying I/O failure.
    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Attach a path to a raw I/O error.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Stable process exit code for the CLI.
    ///
    /// 1 usage/config, 2 ingestion/I/O, 3 malformed artifact, 4 missing
    /// artifact, 5 training failure, 6 internal/invalid call.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Ingest(_) | Error::Io { .. } => 2,
            Error::Format(_) => 3,
            Error::MissingArtifact { .. } => 4,
            Error::Train(_) => 5,
            Error::Input(_) => 6,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_stable() {
        assert_eq!(Error::Config("x".into()).exit_code(), 1);
        assert_eq!(Error::Ingest("x".into()).exit_code(), 2);
        assert_eq!(
            Error::io("/nope", std::io::Error::new(std::io::ErrorKind::NotFound, "gone"))
                .exit_code(),
            2
        );
        assert_eq!(Error::Format("x".into()).exit_code(), 3);
        assert_eq!(
            Error::MissingArtifact { path: "a".into(), hint: "run prepare".into() }.exit_code(),
            4
        );
        assert_eq!(Error::Train("x".into()).exit_code(), 5);
        assert_eq!(Error::Input("x".into()).exit_code(), 6);
    }

    #[test]
    fn messages_name_the_failing_path() {
        let err = Error::io("/data/bgl.log", std::io::Error::other("boom"));
        assert!(err.to_string().contains("/data/bgl.log"));
        let err = Error::MissingArtifact { path: "work/model.ckpt".into(), hint: "run finetune".into() };
        assert!(err.to_string().contains("work/model.ckpt"));
        assert!(err.to_string().contains("run finetune"));
    }
}
