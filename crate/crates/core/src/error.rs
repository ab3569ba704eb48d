use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing label for {0}")]
    MissingLabel(String),
    #[error("missing image for {0}")]
    MissingImage(String),
    #[error("shape mismatch for {name}: image {image:?} vs labels {labels:?}")]
    ShapeMismatch { name: String, image: (usize, usize), labels: (usize, usize) },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("intercept iteration {index} exceeds recursion depth {depth}")]
    InterceptOutOfRange { index: usize, depth: usize },
    #[error("attention row sums to {sum}, not 1")]
    NotNormalized { sum: f64 },
    #[error("non-finite loss in chunk {chunk}")]
    NonFiniteLoss { chunk: usize },
    #[error("LoRA target role `{0}` not present in the model")]
    UnknownLoraTarget(String),
    #[error("eligible pool has {available} images, {requested} shots requested")]
    NotEnoughShots { available: usize, requested: usize },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Image { path: PathBuf, source: image::ImageError },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
