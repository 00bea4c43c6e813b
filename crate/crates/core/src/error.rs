use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("degenerate depth z={z} (z_near={z_near})")]
    DegenerateDepth { z: f64, z_near: f64 },
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown variant: {0}")]
    UnknownVariant(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 usage, 2 i/o, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UnknownVariant(_) => 1,
            Error::Io(_) | Error::Format(_) => 2,
            Error::Numerical(_) => 3,
            // Programming-contract violations surface as usage errors.
            Error::ShapeMismatch(_) | Error::InvalidCamera(_) | Error::DegenerateDepth { .. } => 1,
        }
    }
}
