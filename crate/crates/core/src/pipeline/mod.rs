//! Data, training loops, checkpoints and run configuration.

mod checkpoint;
mod config;
mod data;
mod optim;
mod train;
mod vae_train;

use std::io::Write;
use std::path::Path;

use serde::Serialize;

pub use checkpoint::{file_digest, load_vae, Checkpoint, VaeCheckpoint, FORMAT_VERSION, MAGIC};
pub use config::{
    AugmentConfig, DataSource, OptimConfig, RunConfig, MAX_ROTATION_DEG, MAX_SCALE_RANGE, MAX_TRANSLATION, TOY_LR,
};
pub use data::{
    decode_image, encode_png, image_from_unit, ingest_folder, load_image, save_png, synthetic_dataset, synthetic_frame,
    write_folder, Dataset, ExpressionState, Frame, FrameMeta, Sequence, SyntheticConfig,
};
pub use optim::{grad_norms, Adam};
pub use train::{
    augment_driving, sample_batch, sample_indices, sample_pair, sample_transform, step_rng, FramePair, StepMetrics,
    TrainState, LANDMARK_SEED, PERCEPTUAL_SEED, TRAIN_DTYPE,
};
pub use vae_train::{expression_features, VaeState, VaeStepMetrics};

use crate::error::Result;

/// Loads the dataset a run is configured for.
pub fn load_dataset(source: &DataSource, image_size: usize) -> Result<Dataset> {
    match source {
        DataSource::Synthetic(cfg) => synthetic_dataset(cfg, image_size),
        DataSource::Folder { path } => ingest_folder(path, image_size),
    }
}

/// Appends one JSON record per line.
pub fn append_jsonl(path: &Path, record: &impl Serialize) -> Result<()> {
    let mut line = serde_json::to_string(record).map_err(|e| crate::Error::InvalidArgument(e.to_string()))?;
    line.push('\n');
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(line.as_bytes())?;
    Ok(())
}
