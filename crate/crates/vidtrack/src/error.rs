use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] vidtrack_core::Error),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("missing dependency: {0}")]
    Dependency(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("decode error in {path}: {msg}")]
    Decode { path: PathBuf, msg: String },
    #[error("cache error: {0}")]
    Cache(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code: 2 input, 3 missing dependency, 4 numerical abort,
    /// 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Input(_) | Error::Decode { .. } => 2,
            Error::Core(e) => match e {
                vidtrack_core::Error::External(_) => 1,
                _ => 2,
            },
            Error::Dependency(_) => 3,
            Error::Numerical(_) => 4,
            _ => 1,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<bincode::Error> for Error {
    fn from(e: bincode::Error) -> Self {
        Error::Format(e.to_string())
    }
}
