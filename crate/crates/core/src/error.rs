use alloc::string::String;

#[derive(thiserror::Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error("image must be 3-channel with side >= {min}, got {channels}x{height}x{width}")]
    InvalidImage { channels: usize, height: usize, width: usize, min: usize },
    #[error("pixel values must lie in [0, 1]")]
    PixelRange,
    #[error("size mismatch: expected {expected:?}, got {actual:?}")]
    SizeMismatch { expected: (usize, usize), actual: (usize, usize) },
    #[error("unknown backend `{0}`")]
    UnknownBackend(String),
    #[error("backend `{id}` is a {actual} backend, expected {expected}")]
    BackendKind { id: String, expected: &'static str, actual: &'static str },
    #[error("image {height}x{width} is smaller than one patch of {patch}")]
    SmallerThanPatch { height: usize, width: usize, patch: usize },
    #[error("probability values must be finite and lie in [0, 1]")]
    InvalidProbability,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("classifier has not been trained")]
    Untrained,
    #[error("ground truth contains a single class; AUC is undefined")]
    SingleClass,
    #[error("no valid object mask available")]
    NoValidObject,
    #[error("record `{0}` has no probability mask")]
    MissingMask(String),
    #[error("expected {expected} pyramid stages, got {actual}")]
    StageCount { expected: usize, actual: usize },
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: u64, loss: f64 },
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("ground truth mask missing for sample {0}")]
    MissingGroundTruth(usize),
}

pub type Result<T> = core::result::Result<T, Error>;
