use std::path::PathBuf;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("no frames in {0}")]
    NoFrames(PathBuf),
    #[error("center out of range: center {center} with {len} frames")]
    CenterOutOfRange { center: usize, len: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("bad magic in {0}")]
    BadMagic(String),
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("missing loss component `{0}` for the selected mode")]
    MissingComponent(&'static str),
    #[error("unknown statistic kind `{0}`")]
    UnknownKind(String),
    #[error("missing parameter tensor `{0}`")]
    MissingParameter(String),
    #[error("failed to decode {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
