//! Checkpoint directories: `weights.bin` (little-endian f32) and `metadata.json`.

use super::train::{CroppingMode, SegmentationModel};
use super::unet::{ModelConfig, UNet};
use super::TrainError;
use crate::cropping::CropConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const METADATA_FILE: &str = "metadata.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub model: ModelConfig,
    pub cropping_mode: CroppingMode,
    pub crop: Option<CropConfig>,
    pub train_config_digest: String,
    pub seed: u64,
    pub code_version: String,
    pub num_params: usize,
    pub weights_sha256: String,
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(
    dir: &Path,
    model: &SegmentationModel,
    train_config_digest: &str,
    seed: u64,
) -> Result<CheckpointMetadata, TrainError> {
    std::fs::create_dir_all(dir).map_err(|e| TrainError::Io(format!("{}: {e}", dir.display())))?;
    let bytes: Vec<u8> = model.net.params.iter().flat_map(|p| p.to_le_bytes()).collect();
    let meta = CheckpointMetadata {
        model: model.net.config().clone(),
        cropping_mode: if model.crop.is_some() {
            CroppingMode::GtCrop
        } else {
            CroppingMode::None
        },
        crop: model.crop,
        train_config_digest: train_config_digest.to_string(),
        seed,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        num_params: model.net.num_params(),
        weights_sha256: hex_digest(&bytes),
    };
    let write = |name: &str, data: &[u8]| {
        let p = dir.join(name);
        std::fs::write(&p, data).map_err(|e| TrainError::Io(format!("{}: {e}", p.display())))
    };
    write(WEIGHTS_FILE, &bytes)?;
    write(
        METADATA_FILE,
        serde_json::to_string_pretty(&meta).expect("metadata serializes").as_bytes(),
    )?;
    Ok(meta)
}

pub fn load_checkpoint(dir: &Path) -> Result<(SegmentationModel, CheckpointMetadata), TrainError> {
    let corrupt = |m: String| TrainError::CorruptCheckpoint(format!("{}: {m}", dir.display()));
    let meta_path = dir.join(METADATA_FILE);
    if !meta_path.exists() {
        return Err(TrainError::MissingCheckpoint(dir.to_path_buf()));
    }
    let text = std::fs::read_to_string(&meta_path).map_err(|e| corrupt(e.to_string()))?;
    let meta: CheckpointMetadata = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
    if meta.model.num_classes != crate::NUM_CLASSES {
        return Err(corrupt(format!(
            "model has {} classes, expected {}",
            meta.model.num_classes,
            crate::NUM_CLASSES
        )));
    }
    if meta.cropping_mode == CroppingMode::GtCrop {
        let crop = meta.crop.ok_or_else(|| corrupt("cropped model without a crop config".into()))?;
        if (crop.crop_height, crop.crop_width) != (meta.model.input_height, meta.model.input_width) {
            return Err(corrupt("crop config does not match the model input dims".into()));
        }
    }
    let bytes = std::fs::read(dir.join(WEIGHTS_FILE)).map_err(|e| corrupt(e.to_string()))?;
    if hex_digest(&bytes) != meta.weights_sha256 {
        return Err(corrupt("weights checksum mismatch".into()));
    }
    if bytes.len() != meta.num_params * 4 {
        return Err(corrupt("weights length does not match parameter count".into()));
    }
    let params: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let net = UNet::from_params(meta.model.clone(), params).map_err(corrupt)?;
    Ok((SegmentationModel { net, crop: meta.crop }, meta))
}
