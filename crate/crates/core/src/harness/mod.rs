//! Experiment orchestration: training each strategy over several seeds,
//! evaluation on the internal and external splits (optionally through the
//! cascaded pipeline), persistence, reports and sweeps.

pub mod report;
pub mod svg;
pub mod sweep;

pub use report::{render_report, ReportFiles};
pub use sweep::{sweep, SweepAxis, SweepPoint, SweepResult};

use crate::cropping::{
    bbox_size_error, cascaded_segment, crop_around, mask_bounding_box, paste_back, CropConfig, CropError,
};
use crate::dataset::{generate_dataset, read_dataset, DatasetError, DatasetSpec, GroupedDataset, Split};
use crate::metrics::{
    fairness_report, median, score_subject, write_scores_csv, FairnessReport, MetricsError, StructureScore,
    SubjectScore,
};
use crate::mitigation::TrainingStrategy;
use crate::phantom::{Frame, LabeledSubject};
use crate::trainer::checkpoint::hex_digest;
use crate::trainer::{
    load_checkpoint, predict, save_checkpoint, train, CroppingMode, ModelConfig, SegmentationModel, TrainConfig,
    TrainError,
};
use crate::{Group, Label};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("missing dataset: {0}")]
    MissingDataset(PathBuf),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(PathBuf),
    #[error("configuration conflict: {0}")]
    ConfigConflict(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("no results to report")]
    EmptyResults,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Crop(#[from] CropError),
    #[error("io error: {0}")]
    Io(String),
}

impl HarnessError {
    /// Stable machine-readable error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::MissingDataset(_) => "missing_dataset",
            HarnessError::MissingCheckpoint(_) => "missing_checkpoint",
            HarnessError::ConfigConflict(_) => "config_conflict",
            HarnessError::InvalidConfig(_) => "invalid_config",
            HarnessError::EmptyResults => "empty_results",
            HarnessError::Dataset(DatasetError::MissingDataset(_)) => "missing_dataset",
            HarnessError::Dataset(_) => "dataset",
            HarnessError::Train(TrainError::MissingCheckpoint(_)) => "missing_checkpoint",
            HarnessError::Train(TrainError::CorruptCheckpoint(_)) => "corrupt_checkpoint",
            HarnessError::Train(TrainError::ConfigConflict(_)) => "config_conflict",
            HarnessError::Train(_) => "train",
            HarnessError::Metrics(_) => "metrics",
            HarnessError::Crop(_) => "crop",
            HarnessError::Io(_) => "io",
        }
    }
}

pub(crate) fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |e| HarnessError::Io(format!("{}: {e}", path.display()))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, text).map_err(io_error(path))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(io_error(path))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::InvalidConfig(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cropping {
    #[default]
    None,
    GtCrop,
    /// Full-image model localizes, crop model segments.
    Cascaded,
}

/// Where the subjects come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// A directory written by `gen-data`.
    Dir(PathBuf),
    /// Generated in memory from a spec.
    Spec(DatasetSpec),
}

/// Declarative description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub data: DataSource,
    pub strategy: TrainingStrategy,
    #[serde(default)]
    pub cropping: Cropping,
    pub seeds: Vec<u64>,
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default)]
    pub train: TrainConfig,
    /// Evaluate only the ED frame of external subjects.
    #[serde(default)]
    pub ed_only_external: bool,
    /// For cascaded runs: result directories whose `seed-<s>/checkpoint`
    /// provide the full-image and cropped models. Trained here when absent.
    #[serde(default)]
    pub stage1_from: Option<PathBuf>,
    #[serde(default)]
    pub stage2_from: Option<PathBuf>,
    /// Restrict the minority group's training subjects to the first `n`.
    #[serde(default)]
    pub minority_train_count: Option<usize>,
}

fn default_widths() -> Vec<usize> {
    vec![8, 16, 32, 32]
}

impl ExperimentConfig {
    pub fn new(name: &str, data: DataSource, strategy: TrainingStrategy, cropping: Cropping, seeds: Vec<u64>) -> Self {
        ExperimentConfig {
            name: name.to_string(),
            data,
            strategy,
            cropping,
            seeds,
            widths: default_widths(),
            train: TrainConfig::default(),
            ed_only_external: false,
            stage1_from: None,
            stage2_from: None,
            minority_train_count: None,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.seeds.is_empty() {
            return Err(HarnessError::InvalidConfig("seeds must be nonempty".into()));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(HarnessError::InvalidConfig(format!("bad experiment name `{}`", self.name)));
        }
        self.strategy
            .validate()
            .map_err(|e| HarnessError::ConfigConflict(e.to_string()))?;
        if self.cropping != Cropping::Cascaded && (self.stage1_from.is_some() || self.stage2_from.is_some()) {
            return Err(HarnessError::ConfigConflict(
                "stage1_from/stage2_from only apply to cascaded cropping".into(),
            ));
        }
        Ok(())
    }

    /// Digest of the experiment's content; independent of where results go.
    pub fn digest(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        hex_digest(canonical_json(&value).as_bytes())
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::InvalidConfig(e.to_string()))
    }

    fn train_config(&self, seed: u64, mode: CroppingMode) -> TrainConfig {
        TrainConfig {
            seed,
            strategy: self.strategy,
            cropping_mode: mode,
            ..self.train.clone()
        }
    }

    fn model_config(&self, seed: u64) -> ModelConfig {
        let mut m = ModelConfig::new(0, 0, seed);
        m.widths = self.widths.clone();
        m
    }
}

/// A file with either a single experiment or an `[[experiments]]` list.
pub fn parse_experiments(text: &str) -> Result<Vec<ExperimentConfig>, HarnessError> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Many {
        experiments: Vec<ExperimentConfig>,
    }
    let table: toml::Table = toml::from_str(text).map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
    if table.contains_key("experiments") {
        let many: Many = toml::from_str(text).map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
        return Ok(many.experiments);
    }
    Ok(vec![ExperimentConfig::from_toml(text)?])
}

/// JSON with object keys sorted, for digests.
pub fn canonical_json(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            let parts: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", serde_json::Value::String(k.clone()), canonical_json(&m[k])))
                .collect();
            format!("{{{}}}", parts.join(","))
        }
        serde_json::Value::Array(a) => format!("[{}]", a.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

/// Bounding-box size error of the first stage against ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BboxErrorSummary {
    pub median_x: f64,
    pub median_y: f64,
    pub mean_x: f64,
    pub mean_y: f64,
    pub n: usize,
    /// Images where stage 1 found no heart and the fallback was used.
    pub fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub reports: BTreeMap<Split, FairnessReport>,
    pub bbox_error: BTreeMap<Split, BboxErrorSummary>,
    pub train_time_s: f64,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub name: String,
    pub strategy: TrainingStrategy,
    pub cropping: Cropping,
    pub config_digest: String,
    pub per_seed: Vec<SeedResult>,
    /// Reports on per-subject scores averaged over seeds.
    pub pooled: BTreeMap<Split, FairnessReport>,
    pub runtime_s: f64,
}

impl ExperimentResult {
    /// Digest of everything except timings.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("result serializes");
        strip_timings(&mut v);
        hex_digest(canonical_json(&v).as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self, HarnessError> {
        let p = dir.join(RESULT_FILE);
        if !p.exists() {
            return Err(HarnessError::Io(format!("{} has no {RESULT_FILE}", dir.display())));
        }
        read_json(&p)
    }

    /// Median over seeds of a per-report quantity.
    pub fn seed_median(&self, split: Split, f: impl Fn(&FairnessReport) -> f64) -> Option<f64> {
        let v: Vec<f64> = self.per_seed.iter().filter_map(|s| s.reports.get(&split)).map(f).collect();
        median(&v)
    }
}

fn strip_timings(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(m) => {
            m.retain(|k, _| k != "runtime_s" && k != "train_time_s");
            m.values_mut().for_each(strip_timings);
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(strip_timings),
        _ => {}
    }
}

pub const RESULT_FILE: &str = "result.json";

/// Anything that maps one frame of a subject to a full-size label map.
pub trait Segmenter: Sync {
    fn segment(&self, subject: &LabeledSubject, frame: Frame) -> Result<Array2<Label>, HarnessError>;
}

impl Segmenter for SegmentationModel {
    fn segment(&self, subject: &LabeledSubject, frame: Frame) -> Result<Array2<Label>, HarnessError> {
        Ok(predict(self, subject.frame(frame))?)
    }
}

/// Crop model evaluated on windows around the ground-truth heart.
pub struct GtCropSegmenter<'a>(pub &'a SegmentationModel);

impl Segmenter for GtCropSegmenter<'_> {
    fn segment(&self, subject: &LabeledSubject, frame: Frame) -> Result<Array2<Label>, HarnessError> {
        let crop = self
            .0
            .crop
            .ok_or_else(|| HarnessError::ConfigConflict("model has no crop config".into()))?;
        let bb = mask_bounding_box(subject.mask(frame))?;
        let (img, rec) = crop_around(subject.frame(frame), &bb, &crop)?;
        Ok(paste_back(&predict(self.0, &img)?, &rec)?)
    }
}

/// Returns the ground truth; a test hook for the pipeline.
pub struct Oracle;

impl Segmenter for Oracle {
    fn segment(&self, subject: &LabeledSubject, frame: Frame) -> Result<Array2<Label>, HarnessError> {
        Ok(subject.mask(frame).clone())
    }
}

/// One cascaded prediction plus its stage-1 box.
pub struct CascadeOutcome {
    pub labels: Array2<Label>,
    pub stage1_box: Option<crate::cropping::BoundingBox>,
}

/// Two-stage segmentation of one frame. `stage2` receives the cropped image.
pub fn cascade_frame<S1, S2>(
    stage1: &S1,
    stage2: S2,
    subject: &LabeledSubject,
    frame: Frame,
    crop: &CropConfig,
) -> Result<CascadeOutcome, HarnessError>
where
    S1: Segmenter + ?Sized,
    S2: FnOnce(&Array2<u16>) -> Result<Array2<Label>, HarnessError>,
{
    let out = cascaded_segment(|_: &Array2<u16>| stage1.segment(subject, frame), stage2, subject.frame(frame), crop)?;
    Ok(CascadeOutcome {
        labels: out.labels,
        stage1_box: out.stage1_box,
    })
}

fn frames_for(split: Split, ed_only_external: bool) -> &'static [Frame] {
    if split == Split::External && ed_only_external {
        &[Frame::Ed]
    } else {
        &Frame::ALL
    }
}

/// Scores of every subject under a segmenter.
pub fn evaluate<S: Segmenter + ?Sized>(
    segmenter: &S,
    subjects: &[LabeledSubject],
    frames: &[Frame],
) -> Result<Vec<SubjectScore>, HarnessError> {
    subjects
        .par_iter()
        .map(|s| {
            let preds: Vec<(Frame, Array2<Label>)> = frames
                .iter()
                .map(|&f| Ok((f, segmenter.segment(s, f)?)))
                .collect::<Result<_, HarnessError>>()?;
            let triples: Vec<_> = preds.iter().map(|(f, p)| (*f, p, s.mask(*f))).collect();
            Ok(score_subject(&s.subject_id, &s.group, &triples, s.spacing_mm)?)
        })
        .collect()
}

/// Cascaded scores plus the stage-1 box error of every frame.
pub fn evaluate_cascaded<S1, S2>(
    stage1: &S1,
    stage2: &S2,
    subjects: &[LabeledSubject],
    frames: &[Frame],
    crop: &CropConfig,
) -> Result<(Vec<SubjectScore>, BboxErrorSummary), HarnessError>
where
    S1: Segmenter + ?Sized,
    S2: Fn(&Array2<u16>) -> Result<Array2<Label>, HarnessError> + Sync,
{
    let per: Vec<(SubjectScore, Vec<Option<(f64, f64)>>)> = subjects
        .par_iter()
        .map(|s| {
            let mut preds = Vec::new();
            let mut errs = Vec::new();
            for &f in frames {
                let out = cascade_frame(stage1, stage2, s, f, crop)?;
                errs.push(match out.stage1_box {
                    Some(b) => Some(bbox_size_error(&mask_bounding_box(s.mask(f))?, &b)?),
                    None => None,
                });
                preds.push((f, out.labels));
            }
            let triples: Vec<_> = preds.iter().map(|(f, p)| (*f, p, s.mask(*f))).collect();
            Ok((score_subject(&s.subject_id, &s.group, &triples, s.spacing_mm)?, errs))
        })
        .collect::<Result<_, HarnessError>>()?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut fallbacks = 0;
    let mut scores = Vec::with_capacity(per.len());
    for (score, errs) in per {
        for e in errs {
            match e {
                Some((x, y)) => {
                    xs.push(x);
                    ys.push(y);
                }
                None => fallbacks += 1,
            }
        }
        scores.push(score);
    }
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    let summary = BboxErrorSummary {
        median_x: median(&xs).unwrap_or(f64::NAN),
        median_y: median(&ys).unwrap_or(f64::NAN),
        mean_x: mean(&xs),
        mean_y: mean(&ys),
        n: xs.len(),
        fallbacks,
    };
    Ok((scores, summary))
}

/// Crop model applied to an already cropped image.
pub fn crop_stage(model: &SegmentationModel) -> impl Fn(&Array2<u16>) -> Result<Array2<Label>, HarnessError> + Sync + '_ {
    move |img| Ok(predict(model, img)?)
}

/// Majority (most training subjects) and minority (fewest) groups.
pub fn majority_minority(data: &GroupedDataset) -> Result<(Group, Group), HarnessError> {
    let counts = data.group_counts(Split::Train);
    let maj = counts.iter().max_by_key(|(_, &n)| n).map(|(g, _)| g.clone());
    let min = counts.iter().rev().min_by_key(|(_, &n)| n).map(|(g, _)| g.clone());
    match (maj, min) {
        (Some(a), Some(b)) if a != b => Ok((a, b)),
        _ => Err(HarnessError::ConfigConflict("need at least two training groups".into())),
    }
}

/// Averages each subject's entries over seeds (matching by position).
pub fn pool_scores(per_seed: &[Vec<SubjectScore>]) -> Vec<SubjectScore> {
    let Some(first) = per_seed.first() else {
        return Vec::new();
    };
    first
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let entries = s
                .entries
                .iter()
                .enumerate()
                .map(|(k, e)| {
                    let all: Vec<&StructureScore> = per_seed.iter().map(|seed| &seed[i].entries[k]).collect();
                    let hds: Vec<f64> = all.iter().filter_map(|x| x.hd_mm).collect();
                    StructureScore {
                        frame: e.frame,
                        label: e.label,
                        dsc: all.iter().map(|x| x.dsc).sum::<f64>() / all.len() as f64,
                        hd_mm: (!hds.is_empty()).then(|| hds.iter().sum::<f64>() / hds.len() as f64),
                    }
                })
                .collect();
            SubjectScore::from_entries(s.subject_id.clone(), s.group.clone(), entries)
        })
        .collect()
}

/// Loads or generates the data, applying any minority-count restriction.
pub fn load_data(config: &ExperimentConfig) -> Result<GroupedDataset, HarnessError> {
    let mut data = match &config.data {
        DataSource::Dir(dir) => {
            if !dir.join("manifest.csv").exists() {
                return Err(HarnessError::MissingDataset(dir.clone()));
            }
            read_dataset(dir, None)?
        }
        DataSource::Spec(spec) => generate_dataset(spec)?,
    };
    restrict_minority(&mut data, config.minority_train_count)?;
    Ok(data)
}

pub(crate) fn restrict_minority(data: &mut GroupedDataset, count: Option<usize>) -> Result<(), HarnessError> {
    let Some(n) = count else { return Ok(()) };
    let (_, minority) = majority_minority(data)?;
    let available = data.group_counts(Split::Train)[&minority];
    if n > available {
        return Err(HarnessError::ConfigConflict(format!(
            "minority_train_count {n} exceeds the {available} available `{minority}` subjects"
        )));
    }
    let mut kept = 0;
    data.train.retain(|s| {
        if s.group != minority {
            return true;
        }
        kept += 1;
        kept <= n
    });
    Ok(())
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// Trains a model, or loads it when `<dir>/metadata.json` already matches.
fn train_or_load(
    dir: &Path,
    data: &GroupedDataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(SegmentationModel, Option<f64>, f64), HarnessError> {
    let digest = hex_digest(canonical_json(&serde_json::to_value(cfg).expect("serializes")).as_bytes());
    if let Ok((model, meta)) = load_checkpoint(dir) {
        if meta.train_config_digest == digest && meta.model.widths == model_cfg.widths {
            return Ok((model, None, 0.0));
        }
    }
    let (model, log) = train(&data.train, model_cfg, cfg)?;
    save_checkpoint(dir, &model, &digest, cfg.seed)?;
    write_json(&dir.join("train_log.json"), &log)?;
    Ok((model, log.losses.last().copied(), log.wall_time_s))
}

fn external_checkpoint(from: &Path, seed: u64) -> Result<SegmentationModel, HarnessError> {
    let dir = seed_dir(from, seed).join("checkpoint");
    match load_checkpoint(&dir) {
        Ok((m, _)) => Ok(m),
        Err(TrainError::MissingCheckpoint(p)) => Err(HarnessError::MissingCheckpoint(p)),
        Err(e) => Err(e.into()),
    }
}

/// Evaluates the models of one seed on every nonempty test split.
fn evaluate_seed(
    config: &ExperimentConfig,
    data: &GroupedDataset,
    stage_full: Option<&SegmentationModel>,
    stage_crop: Option<&SegmentationModel>,
) -> Result<BTreeMap<Split, (Vec<SubjectScore>, Option<BboxErrorSummary>)>, HarnessError> {
    let mut out = BTreeMap::new();
    for split in [Split::Internal, Split::External] {
        let subjects = data.split(split);
        if subjects.is_empty() {
            continue;
        }
        let frames = frames_for(split, config.ed_only_external);
        let entry = match config.cropping {
            Cropping::None => (evaluate(stage_full.expect("full model"), subjects, frames)?, None),
            Cropping::GtCrop => (
                evaluate(&GtCropSegmenter(stage_crop.expect("crop model")), subjects, frames)?,
                None,
            ),
            Cropping::Cascaded => {
                let crop_model = stage_crop.expect("crop model");
                let crop = crop_model.crop.ok_or_else(|| {
                    HarnessError::ConfigConflict("stage 2 checkpoint has no crop config".into())
                })?;
                let (s, b) = evaluate_cascaded(
                    stage_full.expect("full model"),
                    &crop_stage(crop_model),
                    subjects,
                    frames,
                    &crop,
                )?;
                (s, Some(b))
            }
        };
        out.insert(split, entry);
    }
    Ok(out)
}

/// Trains (or reuses) the models of every seed, evaluates them and writes
/// `<out>/{result.json, config.json, seed-<s>/..., pooled/<split>/...}`.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<ExperimentResult, HarnessError> {
    config.validate()?;
    let data = load_data(config)?;
    run_experiment_on(config, &data, out)
}

/// [`run_experiment`] on data already in memory.
pub fn run_experiment_on(config: &ExperimentConfig, data: &GroupedDataset, out: &Path) -> Result<ExperimentResult, HarnessError> {
    config.validate()?;
    let start = Instant::now();
    let mut data_owned;
    let data = if config.minority_train_count.is_some() {
        data_owned = data.clone();
        restrict_minority(&mut data_owned, config.minority_train_count)?;
        &data_owned
    } else {
        data
    };
    let (majority, minority) = majority_minority(data)?;
    std::fs::create_dir_all(out).map_err(io_error(out))?;
    write_json(&out.join("config.json"), config)?;

    let mut per_seed = Vec::new();
    let mut all_scores: BTreeMap<Split, Vec<Vec<SubjectScore>>> = BTreeMap::new();
    for &seed in &config.seeds {
        let sdir = seed_dir(out, seed);
        let model_cfg = config.model_config(seed);
        let mut train_time = 0.0;
        let mut final_loss = None;
        let mut track = |(m, l, t): (SegmentationModel, Option<f64>, f64)| {
            train_time += t;
            final_loss = final_loss.or(l);
            m
        };
        let (full, crop) = match config.cropping {
            Cropping::None => (
                Some(track(train_or_load(
                    &sdir.join("checkpoint"),
                    data,
                    &model_cfg,
                    &config.train_config(seed, CroppingMode::None),
                )?)),
                None,
            ),
            Cropping::GtCrop => (
                None,
                Some(track(train_or_load(
                    &sdir.join("checkpoint"),
                    data,
                    &model_cfg,
                    &config.train_config(seed, CroppingMode::GtCrop),
                )?)),
            ),
            Cropping::Cascaded => {
                let full = match &config.stage1_from {
                    Some(p) => external_checkpoint(p, seed)?,
                    None => track(train_or_load(
                        &sdir.join("checkpoint_stage1"),
                        data,
                        &model_cfg,
                        &config.train_config(seed, CroppingMode::None),
                    )?),
                };
                let crop = match &config.stage2_from {
                    Some(p) => external_checkpoint(p, seed)?,
                    None => track(train_or_load(
                        &sdir.join("checkpoint_stage2"),
                        data,
                        &model_cfg,
                        &config.train_config(seed, CroppingMode::GtCrop),
                    )?),
                };
                if full.crop.is_some() || crop.crop.is_none() {
                    return Err(HarnessError::ConfigConflict(
                        "cascaded runs need a full-image stage 1 and a cropped stage 2".into(),
                    ));
                }
                (Some(full), Some(crop))
            }
        };
        let evals = evaluate_seed(config, data, full.as_ref(), crop.as_ref())?;
        let mut reports = BTreeMap::new();
        let mut bbox_error = BTreeMap::new();
        for (split, (scores, bbox)) in evals {
            let dir = sdir.join(split.name());
            std::fs::create_dir_all(&dir).map_err(io_error(&dir))?;
            write_scores_csv(&dir.join("scores.csv"), &scores)?;
            let report = fairness_report(&scores, &majority, &minority)?;
            write_json(&dir.join("fairness_report.json"), &report)?;
            reports.insert(split, report);
            if let Some(b) = bbox {
                bbox_error.insert(split, b);
            }
            all_scores.entry(split).or_default().push(scores);
        }
        per_seed.push(SeedResult {
            seed,
            reports,
            bbox_error,
            train_time_s: train_time,
            final_loss,
        });
    }

    let mut pooled = BTreeMap::new();
    for (split, runs) in &all_scores {
        let scores = pool_scores(runs);
        let dir = out.join("pooled").join(split.name());
        std::fs::create_dir_all(&dir).map_err(io_error(&dir))?;
        write_scores_csv(&dir.join("scores.csv"), &scores)?;
        let report = fairness_report(&scores, &majority, &minority)?;
        write_json(&dir.join("fairness_report.json"), &report)?;
        pooled.insert(*split, report);
    }
    let result = ExperimentResult {
        name: config.name.clone(),
        strategy: config.strategy,
        cropping: config.cropping,
        config_digest: config.digest(),
        per_seed,
        pooled,
        runtime_s: start.elapsed().as_secs_f64(),
    };
    write_json(&out.join(RESULT_FILE), &result)?;
    Ok(result)
}

/// Evaluates one checkpoint directory on one split of an on-disk dataset.
///
/// A directory holding `stage1/` and `stage2/` checkpoints is run through the
/// cascaded pipeline; a cropped checkpoint alone is evaluated on
/// ground-truth crops.
pub fn evaluate_checkpoint(checkpoint: &Path, data_dir: &Path, split: Split, out: &Path) -> Result<FairnessReport, HarnessError> {
    if !data_dir.join("manifest.csv").exists() {
        return Err(HarnessError::MissingDataset(data_dir.to_path_buf()));
    }
    let load = |p: &Path| -> Result<SegmentationModel, HarnessError> {
        match load_checkpoint(p) {
            Ok((m, _)) => Ok(m),
            Err(TrainError::MissingCheckpoint(p)) => Err(HarnessError::MissingCheckpoint(p)),
            Err(e) => Err(e.into()),
        }
    };
    let all = read_dataset(data_dir, None)?;
    let (majority, minority) = majority_minority(&all)?;
    let subjects = all.split(split);
    if subjects.is_empty() {
        return Err(HarnessError::MissingDataset(data_dir.join(split.name())));
    }
    let frames = &Frame::ALL;
    std::fs::create_dir_all(out).map_err(io_error(out))?;
    let (scores, bbox) = if checkpoint.join("stage1").exists() {
        let full = load(&checkpoint.join("stage1"))?;
        let crop_model = load(&checkpoint.join("stage2"))?;
        let crop = crop_model
            .crop
            .ok_or_else(|| HarnessError::ConfigConflict("stage2 has no crop config".into()))?;
        let (s, b) = evaluate_cascaded(&full, &crop_stage(&crop_model), subjects, frames, &crop)?;
        (s, Some(b))
    } else {
        let model = load(checkpoint)?;
        if model.crop.is_some() {
            (evaluate(&GtCropSegmenter(&model), subjects, frames)?, None)
        } else {
            (evaluate(&model, subjects, frames)?, None)
        }
    };
    write_scores_csv(&out.join("scores.csv"), &scores)?;
    let report = fairness_report(&scores, &majority, &minority)?;
    write_json(&out.join("fairness_report.json"), &report)?;
    if let Some(b) = bbox {
        write_json(&out.join("bbox_error.json"), &b)?;
    }
    Ok(report)
}
