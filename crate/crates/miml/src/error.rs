use std::path::PathBuf;

#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("{path}:{line}: {message}")]
    Manifest { path: PathBuf, line: usize, message: String },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] miml_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit status: 1 usage, 2 data, 3 model.
    pub fn exit_code(&self) -> i32 {
        use miml_core::Error as C;
        match self {
            Error::Usage(_) => 1,
            Error::Io { .. } | Error::Image { .. } | Error::Manifest { .. } | Error::Data(_) => 2,
            Error::Checkpoint { .. } => 3,
            Error::Core(e) => match e {
                C::InvalidImage { .. }
                | C::PixelRange
                | C::SizeMismatch { .. }
                | C::SmallerThanPatch { .. }
                | C::InvalidProbability
                | C::SingleClass
                | C::NoValidObject
                | C::MissingMask(_)
                | C::EmptyDataset(_)
                | C::MissingGroundTruth(_) => 2,
                C::Config(_) => 1,
                _ => 3,
            },
        }
    }
}
