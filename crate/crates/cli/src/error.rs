use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("missing upstream artifact: {0}")]
    MissingArtifact(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("{0}")]
    Runtime(String),
}

impl Error {
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::MissingArtifact(_) => "missing_artifact",
            Error::Io(_) => "io",
            Error::Runtime(_) => "runtime",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) => 2,
            Error::MissingArtifact(_) => 3,
            Error::Io(_) | Error::Runtime(_) => 1,
        }
    }

    /// Machine-readable form written to stderr on failure.
    pub fn to_json(&self) -> serde_json::Value {
        json!({ "error": { "kind": self.kind(), "message": self.to_string() } })
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<mcmap_core::Error> for Error {
    fn from(e: mcmap_core::Error) -> Self {
        match e {
            mcmap_core::Error::Config(m) => Error::Validation(m),
            mcmap_core::Error::Io(m) => Error::Io(m),
            e => Error::Runtime(e.to_string()),
        }
    }
}

impl From<mcmap_recon::Error> for Error {
    fn from(e: mcmap_recon::Error) -> Self {
        match e {
            mcmap_recon::Error::Config(m) => Error::Validation(m),
            mcmap_recon::Error::Io(m) => Error::Io(m),
            mcmap_recon::Error::Core(e) => e.into(),
            e => Error::Runtime(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
