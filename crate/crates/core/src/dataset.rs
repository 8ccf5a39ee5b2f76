//! Cohorts of phantom subjects split into train / internal / external sets,
//! and their on-disk layout (PNG frames and masks plus `manifest.csv`).

use crate::phantom::{apply_domain_shift, generate_subject, DomainShift, Frame, LabeledSubject, PhantomError, PhantomParams};
use crate::{Group, Label};
use image::{ImageBuffer, Luma};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error("missing dataset: {0}")]
    MissingDataset(PathBuf),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("unknown split `{0}`")]
    UnknownSplit(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Internal,
    External,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Internal, Split::External];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Internal => "internal",
            Split::External => "external",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| DatasetError::UnknownSplit(s.to_string()))
    }
}

/// Subjects per group for each split, plus generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub seed: u64,
    pub train: BTreeMap<Group, usize>,
    #[serde(default)]
    pub internal: BTreeMap<Group, usize>,
    #[serde(default)]
    pub external: BTreeMap<Group, usize>,
    #[serde(default)]
    pub phantom: PhantomParams,
    /// Applied to every external subject.
    #[serde(default)]
    pub external_shift: DomainShift,
}

impl Default for DatasetSpec {
    /// 200 A / 8 B for training, 60 / 60 internal, 30 / 54 shifted external.
    fn default() -> Self {
        let counts = |a, b| BTreeMap::from([(Group::from("A"), a), (Group::from("B"), b)]);
        DatasetSpec {
            seed: 2024,
            train: counts(200, 8),
            internal: counts(60, 60),
            external: counts(30, 54),
            phantom: PhantomParams::default(),
            external_shift: DomainShift::default(),
        }
    }
}

impl DatasetSpec {
    pub fn counts(&self, split: Split) -> &BTreeMap<Group, usize> {
        match split {
            Split::Train => &self.train,
            Split::Internal => &self.internal,
            Split::External => &self.external,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        self.phantom.validate()?;
        if !self.external_shift.is_finite() {
            return Err(DatasetError::InvalidSpec("external shift is not finite".into()));
        }
        if self.train.values().all(|&n| n == 0) {
            return Err(DatasetError::InvalidSpec("train split is empty".into()));
        }
        for split in Split::ALL {
            for g in self.counts(split).keys() {
                if !self.phantom.group_signals.contains_key(g) {
                    return Err(PhantomError::UnknownGroup(g.clone()).into());
                }
            }
        }
        Ok(())
    }

    /// The group with the fewest training subjects (last in order on ties).
    pub fn minority_group(&self) -> Option<Group> {
        self.train
            .iter()
            .rev()
            .min_by_key(|(_, &n)| n)
            .map(|(g, _)| g.clone())
    }

    pub fn from_toml(text: &str) -> Result<Self, DatasetError> {
        toml::from_str(text).map_err(|e| DatasetError::InvalidSpec(e.to_string()))
    }
}

/// SplitMix64 finalizer, used to derive independent per-subject seeds.
pub fn mix_seed(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn subject_seed(master: u64, split: Split, group: &Group, index: usize) -> u64 {
    let mut h = mix_seed(master ^ (split as u64 + 1).wrapping_mul(0xA24B_AED4_963E_E407));
    for b in group.as_str().bytes() {
        h = mix_seed(h ^ b as u64);
    }
    mix_seed(h ^ index as u64)
}

/// A generated or loaded cohort.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroupedDataset {
    pub train: Vec<LabeledSubject>,
    pub internal: Vec<LabeledSubject>,
    pub external: Vec<LabeledSubject>,
}

impl GroupedDataset {
    pub fn split(&self, split: Split) -> &[LabeledSubject] {
        match split {
            Split::Train => &self.train,
            Split::Internal => &self.internal,
            Split::External => &self.external,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<LabeledSubject> {
        match split {
            Split::Train => &mut self.train,
            Split::Internal => &mut self.internal,
            Split::External => &mut self.external,
        }
    }

    pub fn group_counts(&self, split: Split) -> BTreeMap<Group, usize> {
        let mut out = BTreeMap::new();
        for s in self.split(split) {
            *out.entry(s.group.clone()).or_insert(0) += 1;
        }
        out
    }
}

/// Generates every subject of `spec`; a pure function of the spec.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<GroupedDataset, DatasetError> {
    spec.validate()?;
    let mut out = GroupedDataset::default();
    for split in Split::ALL {
        let jobs: Vec<(Group, usize)> = spec
            .counts(split)
            .iter()
            .flat_map(|(g, &n)| (0..n).map(move |i| (g.clone(), i)))
            .collect();
        let subjects: Result<Vec<_>, PhantomError> = jobs
            .par_iter()
            .map(|(g, i)| {
                let mut s = generate_subject(subject_seed(spec.seed, split, g, *i), g, &spec.phantom)?;
                s.subject_id = format!("{}-{}-{:04}", split.name(), g, i + 1);
                if split == Split::External {
                    s = apply_domain_shift(&s, &spec.external_shift);
                }
                Ok(s)
            })
            .collect();
        *out.split_mut(split) = subjects?;
    }
    Ok(out)
}

const MANIFEST: &str = "manifest.csv";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    subject_id: String,
    group: String,
    split: String,
    spacing_mm: f64,
    seed: u64,
}

fn save_png<P: image::Pixel<Subpixel = S> + image::PixelWithColorType, S: image::Primitive>(
    path: &Path,
    data: &Array2<S>,
) -> Result<(), DatasetError>
where
    [S]: image::EncodableLayout,
{
    let (h, w) = data.dim();
    let buf: ImageBuffer<P, Vec<S>> = ImageBuffer::from_raw(w as u32, h as u32, data.iter().copied().collect())
        .expect("buffer length matches dims");
    buf.save(path).map_err(|e| DatasetError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn open(path: &Path) -> Result<image::DynamicImage, DatasetError> {
    if !path.exists() {
        return Err(DatasetError::MissingDataset(path.to_path_buf()));
    }
    image::open(path).map_err(|e| DatasetError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes `<dir>/<split>/<subject_id>/{frame,mask}_{ED,ES}.png` and `manifest.csv`.
pub fn write_dataset(dataset: &GroupedDataset, dir: &Path) -> Result<(), DatasetError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest_path = dir.join(MANIFEST);
    let mut writer = csv::Writer::from_path(&manifest_path).map_err(|e| DatasetError::Manifest(e.to_string()))?;
    for split in Split::ALL {
        for s in dataset.split(split) {
            let sdir = dir.join(split.name()).join(&s.subject_id);
            std::fs::create_dir_all(&sdir).map_err(io_err(&sdir))?;
            for f in Frame::ALL {
                save_png::<Luma<u16>, u16>(&sdir.join(format!("frame_{}.png", f.name())), s.frame(f))?;
                save_png::<Luma<u8>, u8>(&sdir.join(format!("mask_{}.png", f.name())), s.mask(f))?;
            }
            writer
                .serialize(ManifestRow {
                    subject_id: s.subject_id.clone(),
                    group: s.group.to_string(),
                    split: split.name().to_string(),
                    spacing_mm: s.spacing_mm,
                    seed: s.seed,
                })
                .map_err(|e| DatasetError::Manifest(e.to_string()))?;
        }
    }
    writer.flush().map_err(io_err(&manifest_path))?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`]; `only` restricts the splits loaded.
pub fn read_dataset(dir: &Path, only: Option<Split>) -> Result<GroupedDataset, DatasetError> {
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.exists() {
        return Err(DatasetError::MissingDataset(dir.to_path_buf()));
    }
    let mut reader = csv::Reader::from_path(&manifest_path).map_err(|e| DatasetError::Manifest(e.to_string()))?;
    let mut out = GroupedDataset::default();
    for row in reader.deserialize::<ManifestRow>() {
        let row = row.map_err(|e| DatasetError::Manifest(e.to_string()))?;
        let split: Split = row.split.parse()?;
        if only.is_some_and(|o| o != split) {
            continue;
        }
        let sdir = dir.join(split.name()).join(&row.subject_id);
        let load_frame = |f: Frame| -> Result<Array2<u16>, DatasetError> {
            let img = open(&sdir.join(format!("frame_{}.png", f.name())))?.into_luma16();
            let (w, h) = img.dimensions();
            Ok(Array2::from_shape_vec((h as usize, w as usize), img.into_raw()).expect("dims match"))
        };
        let load_mask = |f: Frame| -> Result<Array2<Label>, DatasetError> {
            let img = open(&sdir.join(format!("mask_{}.png", f.name())))?.into_luma8();
            let (w, h) = img.dimensions();
            Ok(Array2::from_shape_vec((h as usize, w as usize), img.into_raw()).expect("dims match"))
        };
        out.split_mut(split).push(LabeledSubject {
            subject_id: row.subject_id.clone(),
            group: Group::from(row.group),
            frames: [load_frame(Frame::Ed)?, load_frame(Frame::Es)?],
            masks: [load_mask(Frame::Ed)?, load_mask(Frame::Es)?],
            spacing_mm: row.spacing_mm,
            seed: row.seed,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> DatasetSpec {
        let counts = |a, b| BTreeMap::from([(Group::from("A"), a), (Group::from("B"), b)]);
        DatasetSpec {
            seed,
            train: counts(5, 2),
            internal: counts(2, 2),
            external: counts(1, 2),
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn counts_and_ids() {
        let d = generate_dataset(&small_spec(1)).unwrap();
        assert_eq!(d.train.len(), 7);
        assert_eq!(d.group_counts(Split::Train)[&Group::from("A")], 5);
        let mut ids: Vec<&str> = Split::ALL
            .iter()
            .flat_map(|&s| d.split(s).iter().map(|x| x.subject_id.as_str()))
            .collect();
        let n = ids.len();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), n);
        assert_eq!(d.train[0].subject_id, "train-A-0001");
    }

    #[test]
    fn default_cohort_shape() {
        let spec = DatasetSpec::default();
        assert_eq!(spec.train.values().sum::<usize>(), 208);
        assert_eq!(spec.train[&Group::from("A")], 200);
        assert_eq!(spec.minority_group(), Some(Group::from("B")));
    }

    #[test]
    fn empty_external_split() {
        let mut spec = small_spec(3);
        spec.external.clear();
        let d = generate_dataset(&spec).unwrap();
        assert!(d.external.is_empty());
        assert_eq!(d.train, generate_dataset(&small_spec(3)).unwrap().train);
    }

    #[test]
    fn seeds_change_pixels_not_counts() {
        let a = generate_dataset(&small_spec(1)).unwrap();
        let b = generate_dataset(&small_spec(2)).unwrap();
        assert_eq!(a.train.len(), b.train.len());
        assert_ne!(a.train[0].frames, b.train[0].frames);
        assert_eq!(a, generate_dataset(&small_spec(1)).unwrap());
    }

    #[test]
    fn external_split_is_shifted() {
        let d = generate_dataset(&small_spec(4)).unwrap();
        assert!(d.external.iter().all(|s| s.spacing_mm == 1.5));
        assert!(d.internal.iter().all(|s| s.spacing_mm == 1.8));
    }

    #[test]
    fn unknown_group_is_invalid() {
        let mut spec = small_spec(1);
        spec.train.insert(Group::from("Z"), 1);
        assert!(generate_dataset(&spec).is_err());
    }

    #[test]
    fn disk_round_trip() {
        let d = generate_dataset(&small_spec(5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&d, dir.path()).unwrap();
        assert!(dir.path().join("train/train-A-0001/frame_ED.png").exists());
        let back = read_dataset(dir.path(), None).unwrap();
        assert_eq!(back, d);
        let internal = read_dataset(dir.path(), Some(Split::Internal)).unwrap();
        assert!(internal.train.is_empty());
        assert_eq!(internal.internal, d.internal);
    }

    #[test]
    fn spec_toml_round_trip() {
        let spec = DatasetSpec::default();
        let text = toml::to_string(&spec).unwrap();
        assert_eq!(DatasetSpec::from_toml(&text).unwrap(), spec);
        let minimal = DatasetSpec::from_toml("seed = 3\n[train]\nA = 4\nB = 1\n").unwrap();
        assert_eq!(minimal.phantom, PhantomParams::default());
        assert!(minimal.internal.is_empty());
    }
}
