//! One-dimensional sweeps over the oversampling level or the number of
//! minority training subjects.

use super::{io_error, load_data, run_experiment_on, svg, write_json, ExperimentConfig, HarnessError};
use crate::dataset::Split;
use crate::mitigation::SamplerKind;
use crate::Group;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Fraction of full per-batch group balance, in `[0, 1]`.
    OversamplingLevel,
    /// Minority subjects kept in the training split.
    MinorityTrainCount,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::OversamplingLevel => "oversampling_level",
            SweepAxis::MinorityTrainCount => "minority_train_count",
        }
    }

    /// The config for one sweep value.
    pub fn apply(self, base: &ExperimentConfig, value: f64) -> Result<ExperimentConfig, HarnessError> {
        let mut cfg = base.clone();
        cfg.name = format!("{}-{}-{}", base.name, self.name(), value);
        match self {
            SweepAxis::OversamplingLevel => {
                if base.strategy.sampler != SamplerKind::Oversample {
                    return Err(HarnessError::ConfigConflict(format!(
                        "oversampling_level sweep needs an oversampling strategy, got {}",
                        base.strategy
                    )));
                }
                if !(0.0..=1.0).contains(&value) {
                    return Err(HarnessError::InvalidConfig(format!("oversampling level {value} outside [0, 1]")));
                }
                cfg.train.oversampling_level = value;
            }
            SweepAxis::MinorityTrainCount => {
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(HarnessError::InvalidConfig(format!(
                        "minority_train_count must be a non-negative integer, got {value}"
                    )));
                }
                cfg.minority_train_count = Some(value as usize);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl FromStr for SweepAxis {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "oversampling_level" => Ok(SweepAxis::OversamplingLevel),
            "minority_train_count" => Ok(SweepAxis::MinorityTrainCount),
            other => Err(HarnessError::InvalidConfig(format!("unknown sweep axis {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub name: String,
    pub dir: PathBuf,
    /// Internal-split median overall DSC per group, pooled over seeds.
    pub median_dsc: BTreeMap<Group, f64>,
    /// Internal-split fairness gap, median over seeds.
    pub fairness_gap: f64,
    pub per_seed_fairness_gap: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
    pub plots: Vec<PathBuf>,
}

/// Runs one experiment per value under `<out>/<axis>-<value>/` and writes
/// `sweep.json` with two plots.
pub fn sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[f64], out: &Path) -> Result<SweepResult, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::InvalidConfig("sweep needs at least one value".into()));
    }
    let configs: Vec<ExperimentConfig> = values
        .iter()
        .map(|&v| axis.apply(base, v))
        .collect::<Result<_, _>>()?;
    let data = load_data(base)?;
    std::fs::create_dir_all(out).map_err(io_error(out))?;

    let mut points = Vec::new();
    for (&value, cfg) in values.iter().zip(&configs) {
        let dir = out.join(format!("{}-{value}", axis.name()));
        let result = run_experiment_on(cfg, &data, &dir)?;
        let report = result
            .pooled
            .get(&Split::Internal)
            .ok_or_else(|| HarnessError::InvalidConfig("experiment produced no internal report".into()))?;
        let per_seed: Vec<f64> = result
            .per_seed
            .iter()
            .filter_map(|s| s.reports.get(&Split::Internal))
            .map(|r| r.fairness_gap)
            .collect();
        points.push(SweepPoint {
            value,
            name: result.name.clone(),
            dir,
            median_dsc: report.groups.iter().map(|(g, s)| (g.clone(), s.median_dsc)).collect(),
            fairness_gap: result
                .seed_median(Split::Internal, |r| r.fairness_gap)
                .unwrap_or(f64::NAN),
            per_seed_fairness_gap: per_seed,
        });
    }

    let groups: Vec<Group> = points[0].median_dsc.keys().cloned().collect();
    let series: Vec<(String, Vec<(f64, f64)>)> = groups
        .iter()
        .map(|g| {
            let pts = points.iter().map(|p| (p.value, p.median_dsc[g])).collect();
            (g.to_string(), pts)
        })
        .collect();
    let dsc_plot = out.join("median_dsc_vs_axis.svg");
    std::fs::write(
        &dsc_plot,
        svg::xy_plot("Median DSC per group", axis.name(), "median DSC", &series, true),
    )
    .map_err(io_error(&dsc_plot))?;

    let scatter: Vec<(String, Vec<(f64, f64)>)> = groups
        .iter()
        .map(|g| {
            let pts = points.iter().map(|p| (p.fairness_gap, p.median_dsc[g])).collect();
            (g.to_string(), pts)
        })
        .collect();
    let fg_plot = out.join("median_dsc_vs_fairness_gap.svg");
    std::fs::write(
        &fg_plot,
        svg::xy_plot("Median DSC against fairness gap", "fairness gap", "median DSC", &scatter, false),
    )
    .map_err(io_error(&fg_plot))?;

    let result = SweepResult {
        axis,
        points,
        plots: vec![dsc_plot, fg_plot],
    };
    write_json(&out.join("sweep.json"), &result)?;
    Ok(result)
}
