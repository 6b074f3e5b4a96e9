use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] geli_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: line {line}: {source}", path.display())]
    AtLine {
        path: PathBuf,
        line: usize,
        source: geli_core::Error,
    },
    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: geli_core::Error },
    #[error("{0}")]
    Config(String),
    #[error("environment variable {0} is not set")]
    MissingApiKey(&'static str),
    #[error("{0}")]
    Usage(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            Error::Core(e) | Error::AtLine { source: e, .. } | Error::File { source: e, .. } => e.code(),
            Error::Io { .. } => "IO_ERROR",
            Error::Config(_) => "CONFIG_ERROR",
            Error::MissingApiKey(_) => "MISSING_API_KEY",
            Error::Usage(_) => "USAGE_ERROR",
        }
    }

    /// 2 for oracle and transport failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Core(geli_core::Error::OracleUnavailable { .. } | geli_core::Error::OracleRejected(_)) => 2,
            _ => 1,
        }
    }

    /// The single stderr line reported on failure.
    pub fn report_line(&self) -> String {
        let message = self.to_string().replace(['\n', '\r'], " ");
        format!("error code={} message={}", self.code(), message)
    }
}
