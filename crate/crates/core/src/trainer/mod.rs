//! The segmentation network, its training loop and checkpoints.

pub mod augment;
pub mod checkpoint;
pub mod layers;
pub mod train;
pub mod unet;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMetadata};
pub use train::{
    batch_objective, predict, prepare_input, prepare_sample, train, BatchEval, CroppingMode, PreparedSample,
    SegmentationModel, TrainConfig, TrainLog,
};
pub use unet::{ModelConfig, UNet};

use crate::cropping::CropError;
use crate::mitigation::MitigationError;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("configuration conflict: {0}")]
    ConfigConflict(#[from] MitigationError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Crop(#[from] CropError),
    #[error("loss diverged at iteration {0}")]
    Diverged(usize),
    #[error("corrupt checkpoint {0}")]
    CorruptCheckpoint(String),
    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),
    #[error("io error: {0}")]
    Io(String),
}
