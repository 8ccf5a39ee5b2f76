//! Input preparation, the batch objective and the training loop.

use super::augment::augment;
use super::layers::Scalar;
use super::unet::{ModelConfig, UNet};
use super::TrainError;
use crate::cropping::{crop_around, mask_bounding_box, training_crop_size, CropConfig, DEFAULT_BUFFER_PX};
use crate::mitigation::{
    compute_group_weights, loss_and_grad_from_logits, plain_batch_indices, wrapper_coefficients, BalancedSampler,
    GroupIndex, GroupWeighting, SamplerKind, TrainingStrategy, DEFAULT_EPSILON,
};
use crate::phantom::{Frame, LabeledSubject};
use crate::{Group, Label};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CroppingMode {
    #[default]
    None,
    /// Train on windows cut around the ground-truth heart.
    GtCrop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Exponent of the polynomial decay `lr * (1 - t / T)^power`.
    pub poly_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub strategy: TrainingStrategy,
    pub cropping_mode: CroppingMode,
    pub crop_buffer_px: usize,
    /// Per-batch balance of the oversampler, `0` natural to `1` fully balanced.
    pub oversampling_level: f64,
    pub epsilon: f64,
    pub augment: bool,
    pub max_rotation_deg: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 6,
            iterations: 600,
            learning_rate: 0.02,
            poly_power: 0.9,
            momentum: 0.9,
            weight_decay: 3e-5,
            grad_clip: 12.0,
            seed: 0,
            strategy: TrainingStrategy::baseline(),
            cropping_mode: CroppingMode::None,
            crop_buffer_px: DEFAULT_BUFFER_PX,
            oversampling_level: 1.0,
            epsilon: DEFAULT_EPSILON,
            augment: true,
            max_rotation_deg: 15.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.strategy.validate()?;
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("iterations and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        let frac = iteration as f64 / self.iterations as f64;
        self.learning_rate * (1.0 - frac).max(0.0).powf(self.poly_power)
    }
}

/// Per-iteration record of a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Batch objective.
    pub losses: Vec<f64>,
    /// Mean per-sample loss of each group present in the batch.
    pub group_losses: Vec<BTreeMap<Group, f64>>,
    pub group_counts: Vec<BTreeMap<Group, usize>>,
    pub wall_time_s: f64,
}

impl TrainLog {
    pub fn total_counts(&self) -> BTreeMap<Group, usize> {
        let mut out = BTreeMap::new();
        for c in &self.group_counts {
            for (g, n) in c {
                *out.entry(g.clone()).or_insert(0) += n;
            }
        }
        out
    }
}

/// A trained network plus the crop it expects, if any.
#[derive(Debug, Clone)]
pub struct SegmentationModel {
    pub net: UNet<f32>,
    pub crop: Option<CropConfig>,
}

impl SegmentationModel {
    pub fn input_dims(&self) -> (usize, usize) {
        let c = self.net.config();
        (c.input_height, c.input_width)
    }
}

/// One network input: normalized image at working dims and its labels.
#[derive(Debug, Clone)]
pub struct PreparedSample<T> {
    pub input: Vec<T>,
    /// Labels of the unpadded `height x width` region.
    pub target: Vec<Label>,
    pub height: usize,
    pub width: usize,
}

/// Per-image z-score normalization, zero-padded to `work` (bottom/right).
pub fn prepare_input<T: Scalar>(image: &Array2<f64>, work: (usize, usize)) -> Vec<T> {
    let (h, w) = image.dim();
    assert!(h <= work.0 && w <= work.1);
    let n = (h * w) as f64;
    let mean = image.sum() / n;
    let var = image.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-8);
    let mut out = vec![T::zero(); work.0 * work.1];
    for ((i, j), &v) in image.indexed_iter() {
        out[i * work.1 + j] = T::lit((v - mean) / sd);
    }
    out
}

pub fn prepare_sample<T: Scalar>(image: &Array2<f64>, mask: &Array2<Label>, work: (usize, usize)) -> PreparedSample<T> {
    let (height, width) = image.dim();
    PreparedSample {
        input: prepare_input(image, work),
        target: mask.iter().copied().collect(),
        height,
        width,
    }
}

fn valid_logits<T: Scalar>(logits: &[T], classes: usize, work: (usize, usize), h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(classes * h * w);
    for k in 0..classes {
        let plane = &logits[k * work.0 * work.1..(k + 1) * work.0 * work.1];
        for i in 0..h {
            out.extend_from_slice(&plane[i * work.1..i * work.1 + w]);
        }
    }
    out
}

fn scatter_grad<T: Scalar>(grad: &[T], classes: usize, work: (usize, usize), h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); classes * work.0 * work.1];
    for k in 0..classes {
        for i in 0..h {
            let src = &grad[k * h * w + i * w..k * h * w + (i + 1) * w];
            let dst = k * work.0 * work.1 + i * work.1;
            out[dst..dst + w].copy_from_slice(src);
        }
    }
    out
}

/// Value and parameter gradient of the wrapped batch objective.
#[derive(Debug, Clone)]
pub struct BatchEval<T> {
    pub loss: f64,
    pub per_sample: Vec<f64>,
    pub grad: Vec<T>,
}

/// Forward every sample, combine the per-sample losses with the strategy's
/// wrapper, and backpropagate each sample scaled by its coefficient.
/// Gradients are summed in sample order, independent of thread count.
pub fn batch_objective<T: Scalar>(
    net: &UNet<T>,
    batch: &[PreparedSample<T>],
    groups: &[Group],
    strategy: &TrainingStrategy,
    weighting: Option<&GroupWeighting>,
) -> Result<BatchEval<T>, TrainError> {
    let classes = net.config().num_classes;
    let work = net.config().working_dims();
    let forward: Vec<_> = batch
        .par_iter()
        .map(|s| {
            let (logits, cache) = net.forward(&s.input, work.0, work.1);
            let valid = valid_logits(&logits, classes, work, s.height, s.width);
            let (loss, g) = loss_and_grad_from_logits(&valid, &s.target, classes, strategy.base_loss);
            (loss, g, cache)
        })
        .collect();
    let per_sample: Vec<f64> = forward.iter().map(|f| f.0).collect();
    let coeff = wrapper_coefficients(strategy.loss_wrapper, &per_sample, groups, weighting)?;
    let loss = coeff.iter().zip(&per_sample).map(|(c, l)| c * l).sum();
    let grads: Vec<Option<Vec<T>>> = forward
        .par_iter()
        .zip(batch.par_iter())
        .zip(coeff.par_iter())
        .map(|(((_, g, cache), s), &c)| {
            if c == 0.0 {
                return None;
            }
            let scaled: Vec<T> = g.iter().map(|&v| v * T::lit(c)).collect();
            let full = scatter_grad(&scaled, classes, work, s.height, s.width);
            let mut out = vec![T::zero(); net.num_params()];
            net.backward(cache, work.0, work.1, &full, &mut out);
            Some(out)
        })
        .collect();
    let mut grad = vec![T::zero(); net.num_params()];
    for g in grads.into_iter().flatten() {
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    Ok(BatchEval { loss, per_sample, grad })
}

/// Image and mask of one frame as floating point.
fn frame_pair(subject: &LabeledSubject, frame: Frame) -> (Array2<f64>, Array2<Label>) {
    (subject.frame(frame).mapv(f64::from), subject.mask(frame).clone())
}

/// Trains a model on `train_set`.
///
/// The architecture comes from `model_cfg`; its input dims are replaced by the
/// image dims (full-image mode) or the derived crop dims (`GtCrop`).
pub fn train(
    train_set: &[LabeledSubject],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(SegmentationModel, TrainLog), TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let start = Instant::now();
    let dims = train_set[0].frames[0].dim();
    if train_set.iter().any(|s| s.frames.iter().any(|f| f.dim() != dims)) {
        return Err(TrainError::ShapeMismatch("training images differ in size".into()));
    }
    let crop = match cfg.cropping_mode {
        CroppingMode::None => None,
        CroppingMode::GtCrop => Some(training_crop_size(
            train_set.iter().flat_map(|s| s.masks.iter()),
            cfg.crop_buffer_px,
        )?),
    };
    let mut mc = model_cfg.clone();
    (mc.input_height, mc.input_width) = crop.map_or(dims, |c| (c.crop_height, c.crop_width));
    mc.validate().map_err(TrainError::Config)?;
    let work = mc.working_dims();
    let mut net = UNet::<f32>::new(mc);

    let group_of: Vec<Group> = train_set.iter().map(|s| s.group.clone()).collect();
    let index = GroupIndex::new(&group_of);
    let counts: Vec<(Group, usize)> = index
        .groups()
        .iter()
        .enumerate()
        .map(|(k, g)| (g.clone(), index.members(k).len()))
        .collect();
    let weighting = if cfg.strategy.uses_weighting() {
        Some(compute_group_weights(&counts, cfg.epsilon)?)
    } else {
        None
    };
    let mut sampler = match cfg.strategy.sampler {
        SamplerKind::Oversample => Some(BalancedSampler::new(index, cfg.batch_size, cfg.oversampling_level)?),
        SamplerKind::Plain => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity = vec![0.0f32; net.num_params()];
    let mut log = TrainLog::default();
    for it in 0..cfg.iterations {
        let plan = match sampler.as_mut() {
            Some(s) => s.next_batch(&mut rng),
            None => plain_batch_indices(&group_of, cfg.batch_size, &mut rng),
        };
        let mut batch = Vec::with_capacity(plan.indices.len());
        for &i in &plan.indices {
            // Each drawn subject contributes one of its frames.
            let frame = if rng.random::<bool>() { Frame::Ed } else { Frame::Es };
            let (mut img, mut mask) = frame_pair(&train_set[i], frame);
            if cfg.augment {
                (img, mask) = augment(&img, &mask, cfg.max_rotation_deg, &mut rng);
            }
            if let Some(c) = &crop {
                let bb = mask_bounding_box(&mask)?;
                img = crop_around(&img, &bb, c)?.0;
                mask = crop_around(&mask, &bb, c)?.0;
            }
            batch.push(prepare_sample::<f32>(&img, &mask, work));
        }
        let eval = batch_objective(&net, &batch, &plan.group_of, &cfg.strategy, weighting.as_ref())?;
        if !eval.loss.is_finite() {
            return Err(TrainError::Diverged(it));
        }

        let mut grad = eval.grad;
        if cfg.grad_clip > 0.0 {
            let norm = grad.iter().map(|g| (*g as f64).powi(2)).sum::<f64>().sqrt();
            if norm > cfg.grad_clip {
                let s = (cfg.grad_clip / norm) as f32;
                grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        let lr = cfg.learning_rate_at(it) as f32;
        let (mu, wd) = (cfg.momentum as f32, cfg.weight_decay as f32);
        for ((p, v), g) in net.params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
            let g = g + wd * *p;
            *v = mu * *v - lr * g;
            // Nesterov look-ahead.
            *p += mu * *v - lr * g;
        }

        let mut gl: BTreeMap<Group, (f64, usize)> = BTreeMap::new();
        for (l, g) in eval.per_sample.iter().zip(&plan.group_of) {
            let e = gl.entry(g.clone()).or_insert((0.0, 0));
            e.0 += l;
            e.1 += 1;
        }
        log.losses.push(eval.loss);
        log.group_counts.push(gl.iter().map(|(g, (_, n))| (g.clone(), *n)).collect());
        log.group_losses.push(gl.into_iter().map(|(g, (s, n))| (g, s / n as f64)).collect());
    }
    log.wall_time_s = start.elapsed().as_secs_f64();
    Ok((SegmentationModel { net, crop }, log))
}

/// Per-pixel argmax of the model's class scores for one image of the model's
/// input dims.
pub fn predict<P: Copy + Into<f64>>(model: &SegmentationModel, image: &Array2<P>) -> Result<Array2<Label>, TrainError> {
    let dims = model.input_dims();
    if image.dim() != dims {
        return Err(TrainError::ShapeMismatch(format!(
            "image {:?} but model expects {:?}",
            image.dim(),
            dims
        )));
    }
    let cfg = model.net.config();
    let work = cfg.working_dims();
    let input: Vec<f32> = prepare_input(&image.mapv(Into::into), work);
    let (logits, _) = model.net.forward(&input, work.0, work.1);
    let plane = work.0 * work.1;
    Ok(Array2::from_shape_fn(dims, |(i, j)| {
        let at = i * work.1 + j;
        let mut best = 0;
        for k in 1..cfg.num_classes {
            if logits[k * plane + at] > logits[best * plane + at] {
                best = k;
            }
        }
        best as Label
    }))
}
