use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("rotation is not orthonormal with det +1 (max deviation {deviation:.3e})")]
    InvalidRotation { deviation: f64 },

    #[error("mask stack is not a per-pixel partition of unity: {0}")]
    InvalidMasks(String),

    #[error("augmentation transform is not invertible (scale {scale})")]
    NonInvertible { scale: f64 },

    #[error("provider error: {0}")]
    Provider(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("unreadable frame {}: {reason}", path.display())]
    UnreadableFrame { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("missing loss component: {0}")]
    MissingComponent(String),

    #[error("no expression VAE loaded")]
    MissingVae,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
