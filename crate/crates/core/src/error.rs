use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid intrinsics: {0}")]
    Intrinsics(String),
    #[error("pixel ({x}, {y}) is outside the {width}x{height} image")]
    OutOfBounds {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("pixel ({x}, {y}) has no valid neighbours")]
    NoValidNeighbour { x: f64, y: f64 },
    #[error("non-positive depth {0}")]
    NonPositiveDepth(f64),
    #[error("grid shape mismatch: {0}")]
    Shape(String),
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("ill-conditioned fit: {0}")]
    IllConditioned(String),
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unsupported loss selector `{0}`")]
    UnsupportedLoss(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
