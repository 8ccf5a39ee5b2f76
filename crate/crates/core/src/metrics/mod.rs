//! Segmentation scores, per-group summaries and fairness measures.

pub mod overlap;
pub mod stats;

pub use overlap::{dice, hausdorff, squared_distance_transform};
pub use stats::{iqr, mann_whitney_u, mann_whitney_u_using, median, quantile, StatTestResult, TestMethod};

use crate::phantom::Frame;
use crate::{Group, Label};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// The scored structures, in label order.
pub const STRUCTURES: [(Label, &str); 3] = [(1, "LVBP"), (2, "LVM"), (3, "RVBP")];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty sample")]
    EmptySample,
    #[error("sample contains NaN")]
    NonFinite,
    #[error("group `{0}` has no scores")]
    EmptyGroup(Group),
    #[error("both medians are perfect; the error ratio is undefined")]
    PerfectScores,
    #[error("median {0} outside [0, 1]")]
    InvalidMedian(f64),
    #[error("the exact test needs tie-free samples")]
    TiesInExactTest,
    #[error("io error: {0}")]
    Io(String),
}

/// One structure in one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructureScore {
    pub frame: Frame,
    pub label: Label,
    pub dsc: f64,
    /// Missing when prediction or truth lacks the structure.
    pub hd_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectScore {
    pub subject_id: String,
    pub group: Group,
    pub entries: Vec<StructureScore>,
    pub overall_dsc: f64,
    /// Mean over the defined distances; `None` if none is defined.
    pub overall_hd: Option<f64>,
}

impl SubjectScore {
    pub fn from_entries(subject_id: impl Into<String>, group: Group, entries: Vec<StructureScore>) -> Self {
        let overall_dsc = entries.iter().map(|e| e.dsc).sum::<f64>() / entries.len().max(1) as f64;
        let hds: Vec<f64> = entries.iter().filter_map(|e| e.hd_mm).collect();
        let overall_hd = (!hds.is_empty()).then(|| hds.iter().sum::<f64>() / hds.len() as f64);
        SubjectScore {
            subject_id: subject_id.into(),
            group,
            entries,
            overall_dsc,
            overall_hd,
        }
    }

    pub fn missing_hd(&self) -> usize {
        self.entries.iter().filter(|e| e.hd_mm.is_none()).count()
    }
}

/// Scores every structure of every `(frame, prediction, truth)` triple.
pub fn score_subject(
    subject_id: &str,
    group: &Group,
    frames: &[(Frame, &Array2<Label>, &Array2<Label>)],
    spacing_mm: f64,
) -> Result<SubjectScore, MetricsError> {
    let mut entries = Vec::with_capacity(frames.len() * STRUCTURES.len());
    for &(frame, pred, gt) in frames {
        for (label, _) in STRUCTURES {
            entries.push(StructureScore {
                frame,
                label,
                dsc: dice(pred, gt, label)?,
                hd_mm: hausdorff(pred, gt, label, spacing_mm)?,
            });
        }
    }
    Ok(SubjectScore::from_entries(subject_id, group.clone(), entries))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: Group,
    pub n: usize,
    pub median_dsc: f64,
    pub iqr_dsc: f64,
    pub median_hd: Option<f64>,
    pub iqr_hd: Option<f64>,
}

/// Median and IQR of the overall DSC and HD of one group's subjects.
pub fn summarize_group(group: &Group, scores: &[SubjectScore]) -> Result<GroupSummary, MetricsError> {
    let dsc: Vec<f64> = scores.iter().filter(|s| &s.group == group).map(|s| s.overall_dsc).collect();
    if dsc.is_empty() {
        return Err(MetricsError::EmptyGroup(group.clone()));
    }
    let hd: Vec<f64> = scores
        .iter()
        .filter(|s| &s.group == group)
        .filter_map(|s| s.overall_hd)
        .collect();
    Ok(GroupSummary {
        group: group.clone(),
        n: dsc.len(),
        median_dsc: median(&dsc).expect("nonempty"),
        iqr_dsc: iqr(&dsc).expect("nonempty"),
        median_hd: median(&hd),
        iqr_hd: iqr(&hd),
    })
}

/// Fairness gap `D_majority - D_minority` and skewed error ratio
/// `max(1 - D) / min(1 - D)`. The ratio is infinite when exactly one median is 1.
pub fn fairness_metrics(median_majority: f64, median_minority: f64) -> Result<(f64, f64), MetricsError> {
    for m in [median_majority, median_minority] {
        if !(0.0..=1.0).contains(&m) {
            return Err(MetricsError::InvalidMedian(m));
        }
    }
    let (e1, e2) = (1.0 - median_majority, 1.0 - median_minority);
    if e1 == 0.0 && e2 == 0.0 {
        return Err(MetricsError::PerfectScores);
    }
    let fg = median_majority - median_minority;
    let ser = if e1 == e2 { 1.0 } else { e1.max(e2) / e1.min(e2) };
    Ok((fg, ser))
}

/// Everything the report needs about one evaluation of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub majority: Group,
    pub minority: Group,
    pub groups: BTreeMap<Group, GroupSummary>,
    pub fairness_gap: f64,
    /// Infinite (`"inf"`) when exactly one group scores perfectly, undefined
    /// (`null`) when both do.
    #[serde(with = "nullable_f64")]
    pub ser: f64,
    pub mwu_u: f64,
    pub mwu_p: f64,
    pub mwu_method: TestMethod,
    /// Structure/frame pairs without a defined distance, excluded from HD.
    pub missing_hd: usize,
}

mod nullable_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(match Option::<Repr>::deserialize(d)? {
            Some(Repr::Num(x)) => x,
            Some(Repr::Text(t)) if t == "inf" => f64::INFINITY,
            _ => f64::NAN,
        })
    }
}

impl FairnessReport {
    pub fn majority_summary(&self) -> &GroupSummary {
        &self.groups[&self.majority]
    }

    pub fn minority_summary(&self) -> &GroupSummary {
        &self.groups[&self.minority]
    }
}

/// Summaries of every group present, plus gap, ratio and rank test between
/// `majority` and `minority` on per-subject overall DSC.
pub fn fairness_report(scores: &[SubjectScore], majority: &Group, minority: &Group) -> Result<FairnessReport, MetricsError> {
    let mut groups = BTreeMap::new();
    for s in scores {
        if !groups.contains_key(&s.group) {
            groups.insert(s.group.clone(), summarize_group(&s.group, scores)?);
        }
    }
    let maj = groups
        .get(majority)
        .ok_or_else(|| MetricsError::EmptyGroup(majority.clone()))?;
    let min = groups
        .get(minority)
        .ok_or_else(|| MetricsError::EmptyGroup(minority.clone()))?;
    let (fairness_gap, ser) = match fairness_metrics(maj.median_dsc, min.median_dsc) {
        Err(MetricsError::PerfectScores) => (0.0, f64::NAN),
        other => other?,
    };
    let pick = |g: &Group| -> Vec<f64> {
        scores
            .iter()
            .filter(|s| &s.group == g)
            .map(|s| s.overall_dsc)
            .collect()
    };
    let mwu = mann_whitney_u(&pick(majority), &pick(minority))?;
    Ok(FairnessReport {
        majority: majority.clone(),
        minority: minority.clone(),
        groups,
        fairness_gap,
        ser,
        mwu_u: mwu.u,
        mwu_p: mwu.p_two_sided,
        mwu_method: mwu.method,
        missing_hd: scores.iter().map(SubjectScore::missing_hd).sum(),
    })
}

/// One row per subject, frame and structure.
pub fn write_scores_csv(path: &Path, scores: &[SubjectScore]) -> Result<(), MetricsError> {
    let io = |e: std::io::Error| MetricsError::Io(format!("{}: {e}", path.display()));
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(f, "subject_id,group,frame,structure,dsc,hd_mm").map_err(io)?;
    for s in scores {
        for e in &s.entries {
            let name = STRUCTURES
                .iter()
                .find(|(l, _)| *l == e.label)
                .map_or("?", |(_, n)| n);
            let hd = e.hd_mm.map(|h| format!("{h:?}")).unwrap_or_default();
            writeln!(
                f,
                "{},{},{},{},{:?},{}",
                s.subject_id,
                s.group,
                e.frame.name(),
                name,
                e.dsc,
                hd
            )
            .map_err(io)?;
        }
    }
    f.flush().map_err(io)
}

/// Parses a file written by [`write_scores_csv`] back into subject scores.
pub fn read_scores_csv(path: &Path) -> Result<Vec<SubjectScore>, MetricsError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| MetricsError::Io(e.to_string()))?;
    let mut order: Vec<(String, Group)> = Vec::new();
    let mut entries: BTreeMap<String, Vec<StructureScore>> = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| MetricsError::Io(e.to_string()))?;
        let bad = |what: &str| MetricsError::Io(format!("bad {what} in {}", path.display()));
        let id = rec.get(0).ok_or_else(|| bad("row"))?.to_string();
        let frame = match rec.get(2) {
            Some("ED") => Frame::Ed,
            Some("ES") => Frame::Es,
            _ => return Err(bad("frame")),
        };
        let label = STRUCTURES
            .iter()
            .find(|(_, n)| Some(*n) == rec.get(3))
            .ok_or_else(|| bad("structure"))?
            .0;
        let dsc: f64 = rec.get(4).and_then(|x| x.parse().ok()).ok_or_else(|| bad("dsc"))?;
        let hd_mm = match rec.get(5) {
            Some("") | None => None,
            Some(x) => Some(x.parse().map_err(|_| bad("hd"))?),
        };
        if !entries.contains_key(&id) {
            order.push((id.clone(), Group::from(rec.get(1).unwrap_or_default())));
        }
        entries.entry(id).or_default().push(StructureScore {
            frame,
            label,
            dsc,
            hd_mm,
        });
    }
    Ok(order
        .into_iter()
        .map(|(id, g)| {
            let e = entries.remove(&id).unwrap_or_default();
            SubjectScore::from_entries(id, g, e)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subj(id: &str, g: &str, dsc: f64) -> SubjectScore {
        SubjectScore::from_entries(
            id,
            Group::from(g),
            vec![StructureScore {
                frame: Frame::Ed,
                label: 1,
                dsc,
                hd_mm: Some(2.0 * dsc),
            }],
        )
    }

    #[test]
    fn table_example() {
        let (fg, ser) = fairness_metrics(0.896, 0.846).unwrap();
        assert!((fg - 0.050).abs() < 1e-12);
        assert!((ser - 0.154 / 0.104).abs() < 1e-12);
        assert!((ser - 1.486).abs() < 0.01);
        assert_eq!(fairness_metrics(0.9, 0.9).unwrap(), (0.0, 1.0));
        assert_eq!(fairness_metrics(1.0, 1.0), Err(MetricsError::PerfectScores));
        assert!(fairness_metrics(1.0, 0.9).unwrap().1.is_infinite());
    }

    #[test]
    fn perfect_report_has_zero_gap_and_undefined_ratio() {
        let s = [subj("a", "A", 1.0), subj("b", "B", 1.0)];
        let r = fairness_report(&s, &Group::from("A"), &Group::from("B")).unwrap();
        assert_eq!(r.fairness_gap, 0.0);
        assert!(r.ser.is_nan());
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["ser"].is_null());
    }

    #[test]
    fn summary_quantiles() {
        let s = [subj("a", "A", 0.8), subj("b", "A", 0.9), subj("c", "A", 1.0), subj("d", "B", 0.5)];
        let g = summarize_group(&Group::from("A"), &s).unwrap();
        assert_eq!(g.n, 3);
        assert!((g.median_dsc - 0.9).abs() < 1e-12 && (g.iqr_dsc - 0.1).abs() < 1e-12);
        assert!(summarize_group(&Group::from("C"), &s).is_err());
    }

    #[test]
    fn overall_scores_average_structures() {
        let e = |label, dsc, hd| StructureScore {
            frame: Frame::Es,
            label,
            dsc,
            hd_mm: hd,
        };
        let s = SubjectScore::from_entries("x", Group::from("A"), vec![e(1, 0.9, Some(3.0)), e(2, 0.6, None), e(3, 0.0, Some(5.0))]);
        assert!((s.overall_dsc - 0.5).abs() < 1e-12);
        assert_eq!(s.overall_hd, Some(4.0));
        assert_eq!(s.missing_hd(), 1);
    }

    #[test]
    fn report_and_csv_round_trip() {
        let scores: Vec<_> = (0..6)
            .map(|i| subj(&format!("a{i}"), "A", 0.9 + i as f64 * 0.01))
            .chain((0..6).map(|i| subj(&format!("b{i}"), "B", 0.8 + i as f64 * 0.01)))
            .collect();
        let r = fairness_report(&scores, &Group::from("A"), &Group::from("B")).unwrap();
        assert!(r.fairness_gap > 0.0 && r.ser > 1.0);
        assert_eq!(r.mwu_u, 0.0);
        assert_eq!(r.mwu_method, TestMethod::Exact);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scores.csv");
        write_scores_csv(&p, &scores).unwrap();
        assert_eq!(read_scores_csv(&p).unwrap(), scores);
        let back: FairnessReport = serde_json::from_value(serde_json::to_value(&r).unwrap()).unwrap();
        assert_eq!(back, r);
        let json = serde_json::to_value(&r).unwrap();
        for key in ["fairness_gap", "ser", "mwu_u", "mwu_p", "mwu_method"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }
}
