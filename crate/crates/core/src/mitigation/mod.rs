//! Bias-mitigation primitives: inverse-frequency group weights, group-balanced
//! oversampling, the reweighted and Group DRO batch objectives, and the base
//! segmentation losses they wrap.

pub mod loss;
pub mod sampler;
pub mod weights;

pub use loss::{
    group_dro_loss, loss_and_grad_from_logits, reweighted_loss, segmentation_loss, wrapped_loss,
    wrapper_coefficients, LossKind, LossWrapper, DICE_SMOOTH,
};
pub use sampler::{
    balanced_batch_indices, plain_batch_indices, BalancedSampler, BatchPlan, GroupIndex, SamplerKind,
};
pub use weights::{compute_group_weights, GroupWeighting, DEFAULT_EPSILON};

use crate::Group;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MitigationError {
    #[error("no groups given")]
    EmptyGrouping,
    #[error("all group counts are zero")]
    AllZeroCounts,
    #[error("epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
    #[error("group `{0}` has no members")]
    EmptyGroup(Group),
    #[error("batch size {batch_size} is smaller than the number of groups ({groups})")]
    BatchTooSmall { batch_size: usize, groups: usize },
    #[error("oversampling level must lie in [0, 1], got {0}")]
    InvalidLevel(f64),
    #[error("group `{0}` is missing from the weighting")]
    UnknownGroup(Group),
    #[error("{losses} losses but {groups} group labels")]
    LengthMismatch { losses: usize, groups: usize },
    #[error("empty batch")]
    EmptyInput,
    #[error("reweighing requires a group weighting")]
    MissingWeighting,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("configuration conflict: {0}")]
    ConfigConflict(String),
    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),
}

/// Sampler, loss wrapper and base loss of one training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TrainingStrategy {
    pub sampler: SamplerKind,
    pub loss_wrapper: LossWrapper,
    pub base_loss: LossKind,
}

impl TrainingStrategy {
    /// Every named strategy, in report order.
    pub const NAMES: [&'static str; 7] = [
        "baseline",
        "oversample",
        "reweigh",
        "group_dro",
        "oversample+group_dro",
        "reweigh+group_dro",
        "oversample+reweigh",
    ];

    pub fn baseline() -> Self {
        TrainingStrategy {
            sampler: SamplerKind::Plain,
            loss_wrapper: LossWrapper::None,
            base_loss: LossKind::CeDice,
        }
    }

    /// Group DRO averages per-sample losses within groups, which is only
    /// consistent for an additive base loss, so it must run on plain CE.
    pub fn validate(&self) -> Result<(), MitigationError> {
        let dro = matches!(self.loss_wrapper, LossWrapper::GroupDro | LossWrapper::ReweighGroupDro);
        if dro && self.base_loss != LossKind::Ce {
            return Err(MitigationError::ConfigConflict(format!(
                "{} requires the ce base loss, got {:?}",
                self.name(),
                self.base_loss
            )));
        }
        if self.base_loss == LossKind::SoftDice {
            return Err(MitigationError::ConfigConflict(
                "soft_dice alone is not a supported training loss".into(),
            ));
        }
        Ok(())
    }

    pub fn uses_weighting(&self) -> bool {
        matches!(self.loss_wrapper, LossWrapper::Reweigh | LossWrapper::ReweighGroupDro)
    }

    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        if self.sampler == SamplerKind::Oversample {
            parts.push("oversample");
        }
        match self.loss_wrapper {
            LossWrapper::None => {}
            LossWrapper::Reweigh => parts.push("reweigh"),
            LossWrapper::GroupDro => parts.push("group_dro"),
            LossWrapper::ReweighGroupDro => parts.extend(["reweigh", "group_dro"]),
        }
        if parts.is_empty() {
            "baseline".to_string()
        } else {
            parts.join("+")
        }
    }
}

impl FromStr for TrainingStrategy {
    type Err = MitigationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (sampler, loss_wrapper) = match s.trim() {
            "baseline" => (SamplerKind::Plain, LossWrapper::None),
            "oversample" => (SamplerKind::Oversample, LossWrapper::None),
            "reweigh" => (SamplerKind::Plain, LossWrapper::Reweigh),
            "group_dro" => (SamplerKind::Plain, LossWrapper::GroupDro),
            "oversample+group_dro" => (SamplerKind::Oversample, LossWrapper::GroupDro),
            "reweigh+group_dro" => (SamplerKind::Plain, LossWrapper::ReweighGroupDro),
            "oversample+reweigh" => (SamplerKind::Oversample, LossWrapper::Reweigh),
            other => return Err(MitigationError::UnknownStrategy(other.to_string())),
        };
        let base_loss = match loss_wrapper {
            LossWrapper::GroupDro | LossWrapper::ReweighGroupDro => LossKind::Ce,
            _ => LossKind::CeDice,
        };
        Ok(TrainingStrategy {
            sampler,
            loss_wrapper,
            base_loss,
        })
    }
}

impl TryFrom<String> for TrainingStrategy {
    type Error = MitigationError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<TrainingStrategy> for String {
    fn from(s: TrainingStrategy) -> String {
        s.name()
    }
}

impl fmt::Display for TrainingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}
