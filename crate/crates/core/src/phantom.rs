//! Synthetic short-axis phantoms.
//!
//! Each subject is a torso ellipse containing a left-ventricular disk (LVBP)
//! inside a myocardial annulus (LVM), with a right-ventricular crescent (RVBP)
//! abutting the annulus. Two frames are rendered: an end-diastole analog and
//! an end-systole analog with contracted radii.
//!
//! Everything inside the heart (geometry, intensities, noise) is drawn from
//! RNG streams that do not depend on the group. The group only changes pixels
//! whose label is background: subcutaneous rim thickness, tissue offset,
//! smooth texture and bright vessel-like blobs.

use crate::{Group, Label};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PhantomError {
    #[error("invalid phantom parameters: {0}")]
    InvalidParams(String),
    #[error("no group signal configured for group `{0}`")]
    UnknownGroup(Group),
}

const AIR: f64 = 0.02;
const FAT: f64 = 0.88;
const TISSUE: f64 = 0.40;
const LVBP: f64 = 0.80;
const LVM: f64 = 0.20;
const RVBP: f64 = 0.74;
const VESSEL: f64 = 0.78;
/// Body ellipse semi-axes as fractions of the image side.
const BODY_SEMI_COLS: f64 = 0.46;
const BODY_SEMI_ROWS: f64 = 0.40;

/// Cardiac phase of a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Frame {
    #[serde(rename = "ED")]
    Ed,
    #[serde(rename = "ES")]
    Es,
}

impl Frame {
    pub const ALL: [Frame; 2] = [Frame::Ed, Frame::Es];

    pub fn index(self) -> usize {
        match self {
            Frame::Ed => 0,
            Frame::Es => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Frame::Ed => "ED",
            Frame::Es => "ES",
        }
    }
}

/// Out-of-heart appearance of one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSignal {
    /// Subcutaneous fat rim thickness range, pixels.
    pub rim_thickness: (f64, f64),
    /// Added to the tissue intensity (unit intensity scale).
    pub background_offset: f64,
    pub texture_amplitude: f64,
    /// Dominant wavelength of the tissue texture, pixels.
    pub texture_scale: f64,
    /// Inclusive range of bright vessel-like blobs per subject.
    pub blob_count: (u32, u32),
    pub blob_radius: (f64, f64),
}

impl GroupSignal {
    pub fn plain() -> Self {
        GroupSignal {
            rim_thickness: (2.0, 4.0),
            background_offset: 0.0,
            texture_amplitude: 0.02,
            texture_scale: 24.0,
            blob_count: (0, 0),
            blob_radius: (4.0, 7.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RvParams {
    /// RV circle centre distance from the LV centre, as a fraction of the LV
    /// epicardial radius.
    pub offset: (f64, f64),
    /// RV circle radius as a fraction of the LV epicardial radius.
    pub scale: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub image_size: usize,
    pub spacing_mm: f64,
    /// LV epicardial radius range at end-diastole, pixels.
    pub heart_radius_range: (f64, f64),
    pub myocardium_thickness_range: (f64, f64),
    pub rv: RvParams,
    /// Fractional shrink of the LV cavity radius from ED to ES.
    pub ed_es_contraction: f64,
    /// Maximum displacement of the LV centre from the image centre, pixels.
    pub center_jitter: f64,
    pub noise_sigma: f64,
    /// Blobs are kept outside this Chebyshev radius around the heart box centre.
    pub blob_exclusion: f64,
    pub group_signals: BTreeMap<Group, GroupSignal>,
}

impl Default for PhantomParams {
    fn default() -> Self {
        let mut group_signals = BTreeMap::new();
        group_signals.insert(Group::from("A"), GroupSignal::plain());
        group_signals.insert(
            Group::from("B"),
            GroupSignal {
                rim_thickness: (8.0, 12.0),
                background_offset: 0.06,
                texture_amplitude: 0.05,
                texture_scale: 10.0,
                blob_count: (2, 3),
                blob_radius: (4.0, 7.0),
            },
        );
        PhantomParams {
            image_size: 128,
            spacing_mm: 1.8,
            heart_radius_range: (9.0, 12.0),
            myocardium_thickness_range: (3.0, 5.0),
            rv: RvParams {
                offset: (0.6, 0.8),
                scale: (0.85, 1.05),
            },
            ed_es_contraction: 0.25,
            center_jitter: 5.0,
            noise_sigma: 0.03,
            blob_exclusion: 26.0,
            group_signals,
        }
    }
}

fn check_range(name: &str, (lo, hi): (f64, f64), min: f64) -> Result<(), PhantomError> {
    if !(lo.is_finite() && hi.is_finite()) || lo > hi || lo < min {
        return Err(PhantomError::InvalidParams(format!(
            "{name} range ({lo}, {hi}) must be finite, ordered and >= {min}"
        )));
    }
    Ok(())
}

impl PhantomParams {
    /// Largest distance from the LV centre to any heart pixel.
    fn max_heart_extent(&self) -> f64 {
        let r = self.heart_radius_range.1;
        r.max(self.rv.offset.1 * r + self.rv.scale.1 * r)
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::InvalidParams(m));
        if self.image_size < 32 {
            return bad(format!("image_size {} is below 32", self.image_size));
        }
        if !(self.spacing_mm > 0.0 && self.spacing_mm.is_finite()) {
            return bad("spacing_mm must be positive".into());
        }
        if !(self.ed_es_contraction > 0.0 && self.ed_es_contraction < 1.0) {
            return bad("ed_es_contraction must lie in (0, 1)".into());
        }
        if !(self.noise_sigma >= 0.0 && self.center_jitter >= 0.0 && self.blob_exclusion >= 0.0) {
            return bad("noise_sigma, center_jitter and blob_exclusion must be >= 0".into());
        }
        check_range("heart_radius_range", self.heart_radius_range, 1.0)?;
        check_range("myocardium_thickness_range", self.myocardium_thickness_range, 2.0)?;
        check_range("rv.offset", self.rv.offset, 0.0)?;
        check_range("rv.scale", self.rv.scale, 0.0)?;
        // The cavity must survive contraction with at least a couple of pixels.
        let min_cavity = (self.heart_radius_range.0 - self.myocardium_thickness_range.1)
            * (1.0 - self.ed_es_contraction);
        if min_cavity < 2.0 {
            return bad(format!("LV cavity can shrink to {min_cavity:.2} px (< 2)"));
        }
        // The RV crescent must reach at least 2 px beyond the epicardium.
        let c = self.ed_es_contraction;
        let epi_es = self.heart_radius_range.0 * (1.0 - c) + self.myocardium_thickness_range.0 * 1.3 * c;
        let reach_es = (self.rv.offset.0 + self.rv.scale.0 * (1.0 - 0.5 * c) - 1.0) * epi_es;
        let reach_ed = (self.rv.offset.0 + self.rv.scale.0 - 1.0) * self.heart_radius_range.0;
        if reach_es.min(reach_ed) < 2.0 {
            return bad("RV circle does not extend beyond the LV epicardium".into());
        }
        if self.group_signals.is_empty() {
            return bad("at least one group signal is required".into());
        }
        let mut max_rim: f64 = 0.0;
        for (g, s) in &self.group_signals {
            check_range(&format!("{g}.rim_thickness"), s.rim_thickness, 0.0)?;
            check_range(&format!("{g}.blob_radius"), s.blob_radius, 1.0)?;
            if s.blob_count.0 > s.blob_count.1 {
                return bad(format!("{g}.blob_count range is reversed"));
            }
            if !(s.texture_scale > 0.0 && s.texture_amplitude >= 0.0 && s.background_offset.is_finite()) {
                return bad(format!("{g}: texture_scale must be > 0 and amplitude >= 0"));
            }
            max_rim = max_rim.max(s.rim_thickness.1);
        }
        let n = self.image_size as f64;
        let inner = n * BODY_SEMI_COLS.min(BODY_SEMI_ROWS) - max_rim;
        let needed = self.max_heart_extent() + self.center_jitter + 4.0;
        if needed > inner {
            return bad(format!(
                "heart extent {:.1} px plus jitter and 4 px margin exceeds the {:.1} px available inside the rim",
                self.max_heart_extent(),
                inner
            ));
        }
        Ok(())
    }
}

/// One synthetic subject: two frames with their label maps.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSubject {
    pub subject_id: String,
    pub group: Group,
    /// Indexed by [`Frame::index`]. 16-bit intensities.
    pub frames: [Array2<u16>; 2],
    /// Label maps with values in {0, 1, 2, 3}.
    pub masks: [Array2<Label>; 2],
    pub spacing_mm: f64,
    pub seed: u64,
}

impl LabeledSubject {
    pub fn frame(&self, f: Frame) -> &Array2<u16> {
        &self.frames[f.index()]
    }

    pub fn mask(&self, f: Frame) -> &Array2<Label> {
        &self.masks[f.index()]
    }
}

#[derive(Debug, Clone, Copy)]
struct HeartGeometry {
    lv_center: (f64, f64),
    endo: f64,
    epi: f64,
    rv_center: (f64, f64),
    rv_radius: f64,
}

impl HeartGeometry {
    fn label(&self, y: f64, x: f64) -> Label {
        let d = ((y - self.lv_center.0).powi(2) + (x - self.lv_center.1).powi(2)).sqrt();
        if d <= self.endo {
            1
        } else if d <= self.epi {
            2
        } else if ((y - self.rv_center.0).powi(2) + (x - self.rv_center.1).powi(2)).sqrt() <= self.rv_radius {
            3
        } else {
            0
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn to_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Renders one subject. Pure function of `(seed, group, params)`.
pub fn generate_subject(seed: u64, group: &Group, params: &PhantomParams) -> Result<LabeledSubject, PhantomError> {
    params.validate()?;
    let signal = params
        .group_signals
        .get(group)
        .ok_or_else(|| PhantomError::UnknownGroup(group.clone()))?;
    let n = params.image_size;
    let nf = n as f64;
    let centre = (nf - 1.0) / 2.0;

    // Stream 0: heart geometry (group independent).
    let mut geo = stream(seed, 0);
    let jitter_r = params.center_jitter * geo.random::<f64>().sqrt();
    let jitter_a = geo.random_range(0.0..2.0 * PI);
    let lv_center = (centre + jitter_r * jitter_a.sin(), centre + jitter_r * jitter_a.cos());
    let epi_ed = uniform(&mut geo, params.heart_radius_range);
    let thick_ed = uniform(&mut geo, params.myocardium_thickness_range).min(epi_ed - 2.0);
    let rv_offset = uniform(&mut geo, params.rv.offset);
    let rv_scale = uniform(&mut geo, params.rv.scale);
    let rv_angle = geo.random_range(0.0..2.0 * PI);

    let c = params.ed_es_contraction;
    let make_geometry = |endo: f64, epi: f64, rv_shrink: f64| {
        let d = rv_offset * epi;
        HeartGeometry {
            lv_center,
            endo,
            epi,
            rv_center: (lv_center.0 + d * rv_angle.sin(), lv_center.1 + d * rv_angle.cos()),
            rv_radius: rv_scale * epi * rv_shrink,
        }
    };
    let endo_ed = epi_ed - thick_ed;
    let endo_es = endo_ed * (1.0 - c);
    let thick_es = thick_ed * (1.0 + 0.3 * c);
    let geometries = [
        make_geometry(endo_ed, epi_ed, 1.0),
        make_geometry(endo_es, endo_es + thick_es, 1.0 - 0.5 * c),
    ];

    let masks: [Array2<Label>; 2] =
        geometries.map(|g| Array2::from_shape_fn((n, n), |(i, j)| g.label(i as f64, j as f64)));

    // Stream 3: group appearance. Its draws do not depend on the group name,
    // so two groups with equal ranges render identical out-of-heart structure.
    let mut app = stream(seed, 3);
    let rim = uniform(&mut app, signal.rim_thickness);
    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            let theta = app.random_range(0.0..PI);
            let wavelength = signal.texture_scale * app.random_range(0.7..1.3);
            let phase = app.random_range(0.0..2.0 * PI);
            let k = 2.0 * PI / wavelength;
            (k * theta.cos(), k * theta.sin(), phase)
        })
        .collect();
    let n_blobs = if signal.blob_count.1 > signal.blob_count.0 {
        app.random_range(signal.blob_count.0..=signal.blob_count.1)
    } else {
        signal.blob_count.0
    };
    let (semi_r, semi_c) = (nf * BODY_SEMI_ROWS, nf * BODY_SEMI_COLS);
    // Bounding-box centre of the ED heart, used to keep blobs out of crops.
    let heart_box_centre = box_centre(&masks[0]);
    let mut blobs = Vec::new();
    for _ in 0..n_blobs {
        let radius = uniform(&mut app, signal.blob_radius);
        for _attempt in 0..64 {
            let y = app.random_range(-semi_r..semi_r);
            let x = app.random_range(-semi_c..semi_c);
            let rho = ((y / semi_r).powi(2) + (x / semi_c).powi(2)).sqrt();
            let dist_to_rim = if rho > 0.0 {
                ((y * y + x * x).sqrt() / rho) * (1.0 - rho) - rim
            } else {
                f64::INFINITY
            };
            let (by, bx) = (centre + y, centre + x);
            let cheb = (by - heart_box_centre.0).abs().max((bx - heart_box_centre.1).abs());
            if dist_to_rim > radius + 2.0 && cheb > params.blob_exclusion + radius {
                blobs.push((by, bx, radius));
                break;
            }
        }
    }

    let out_of_heart = |i: usize, j: usize| -> f64 {
        let (y, x) = (i as f64 - centre, j as f64 - centre);
        let rho = ((y / semi_r).powi(2) + (x / semi_c).powi(2)).sqrt();
        if rho > 1.0 {
            return AIR;
        }
        // Distance to the body outline along the ray from the centre.
        let depth = if rho > 0.0 {
            ((y * y + x * x).sqrt() / rho) * (1.0 - rho)
        } else {
            f64::INFINITY
        };
        if depth < rim {
            return FAT;
        }
        for &(by, bx, r) in &blobs {
            if (i as f64 - by).powi(2) + (j as f64 - bx).powi(2) <= r * r {
                return VESSEL;
            }
        }
        let tex: f64 = waves
            .iter()
            .map(|&(ky, kx, ph)| (ky * i as f64 + kx * j as f64 + ph).sin())
            .sum::<f64>()
            / 2.0;
        TISSUE + signal.background_offset + signal.texture_amplitude * tex
    };
    let background = Array2::from_shape_fn((n, n), |(i, j)| out_of_heart(i, j));

    let normal = Normal::new(0.0, params.noise_sigma.max(0.0)).expect("sigma >= 0");
    let frames: [Array2<u16>; 2] = std::array::from_fn(|f| {
        // Streams 1 and 2: per-frame noise, drawn for every pixel in raster order.
        let mut noise = stream(seed, 1 + f as u64);
        let mask = &masks[f];
        Array2::from_shape_fn((n, n), |(i, j)| {
            let base = match mask[[i, j]] {
                1 => LVBP,
                2 => LVM,
                3 => RVBP,
                _ => background[[i, j]],
            };
            let eps = if params.noise_sigma > 0.0 {
                normal.sample(&mut noise)
            } else {
                0.0
            };
            to_u16(base + eps)
        })
    });

    Ok(LabeledSubject {
        subject_id: format!("s{seed:016x}"),
        group: group.clone(),
        frames,
        masks,
        spacing_mm: params.spacing_mm,
        seed,
    })
}

fn box_centre(mask: &Array2<Label>) -> (f64, f64) {
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for ((i, j), &v) in mask.indexed_iter() {
        if v > 0 {
            r0 = r0.min(i);
            r1 = r1.max(i);
            c0 = c0.min(j);
            c1 = c1.max(j);
        }
    }
    ((r0 + r1) as f64 / 2.0, (c0 + c1) as f64 / 2.0)
}

/// Acquisition shift applied to an external cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub gain: f64,
    /// Additive offset in raw 16-bit units.
    pub bias: f64,
    /// Extra Gaussian noise, raw 16-bit units.
    pub noise_sigma: f64,
    /// Replacement pixel spacing recorded on shifted subjects.
    #[serde(default)]
    pub spacing_mm: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl DomainShift {
    pub fn identity() -> Self {
        DomainShift {
            gain: 1.0,
            bias: 0.0,
            noise_sigma: 0.0,
            spacing_mm: None,
            seed: 0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.gain.is_finite()
            && self.bias.is_finite()
            && self.noise_sigma.is_finite()
            && self.noise_sigma >= 0.0
            && self.spacing_mm.is_none_or(|s| s.is_finite() && s > 0.0)
    }
}

impl Default for DomainShift {
    fn default() -> Self {
        DomainShift {
            gain: 0.9,
            bias: 1500.0,
            noise_sigma: 2600.0,
            spacing_mm: Some(1.5),
            seed: 7,
        }
    }
}

/// Pointwise `p -> clamp(round(gain * p + bias + noise))`; masks untouched.
pub fn apply_domain_shift(subject: &LabeledSubject, shift: &DomainShift) -> LabeledSubject {
    let mut out = subject.clone();
    let normal = (shift.noise_sigma > 0.0).then(|| Normal::new(0.0, shift.noise_sigma).expect("finite sigma"));
    let mut rng = stream(subject.seed ^ shift.seed.rotate_left(17), 11);
    for frame in out.frames.iter_mut() {
        frame.mapv_inplace(|p| {
            let noise = normal.as_ref().map_or(0.0, |d| d.sample(&mut rng));
            (shift.gain * p as f64 + shift.bias + noise).round().clamp(0.0, 65535.0) as u16
        });
    }
    if let Some(s) = shift.spacing_mm {
        out.spacing_mm = s;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn a() -> Group {
        Group::from("A")
    }
    fn b() -> Group {
        Group::from("B")
    }

    #[test]
    fn same_inputs_give_bit_identical_subjects() {
        let p = PhantomParams::default();
        let s1 = generate_subject(42, &b(), &p).unwrap();
        let s2 = generate_subject(42, &b(), &p).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn groups_share_the_heart_and_differ_outside_by_the_offset() {
        let mut p = PhantomParams::default();
        let mut sig_b = GroupSignal::plain();
        sig_b.background_offset = 0.05;
        p.group_signals.insert(b(), sig_b);
        let sa = generate_subject(9, &a(), &p).unwrap();
        let sb = generate_subject(9, &b(), &p).unwrap();
        assert_eq!(sa.masks, sb.masks);
        for f in Frame::ALL {
            let (fa, fb, m) = (sa.frame(f), sb.frame(f), sa.mask(f));
            let mut diffs = Vec::new();
            for ((idx, &label), (&va, &vb)) in m.indexed_iter().zip(fa.iter().zip(fb.iter())) {
                if label > 0 {
                    assert_eq!(va, vb, "in-heart pixel {idx:?} differs");
                } else if va != vb {
                    diffs.push(vb as f64 - va as f64);
                }
            }
            // Offset is applied to body tissue only; those pixels carry all the difference.
            let mean = diffs.iter().sum::<f64>() / diffs.len() as f64 / 65535.0;
            assert!((mean - 0.05).abs() < 2e-3, "mean out-of-heart shift {mean}");
        }
    }

    #[test]
    fn masks_hold_only_valid_labels_and_every_structure() {
        let p = PhantomParams::default();
        for seed in 0..40 {
            let group = if seed % 2 == 0 { a() } else { b() };
            let s = generate_subject(seed, &group, &p).unwrap();
            for m in &s.masks {
                assert_eq!(m.dim(), s.frames[0].dim());
                let mut seen = [false; 4];
                for &v in m {
                    assert!(v <= 3);
                    seen[v as usize] = true;
                }
                assert!(seen.iter().all(|&x| x), "seed {seed}: missing label");
            }
        }
    }

    #[test]
    fn myocardium_encloses_the_blood_pool() {
        let p = PhantomParams::default();
        for seed in 0..20 {
            let s = generate_subject(seed, &a(), &p).unwrap();
            for m in &s.masks {
                let (h, w) = m.dim();
                for ((i, j), &v) in m.indexed_iter() {
                    if v != 1 {
                        continue;
                    }
                    for (di, dj) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                        let (ni, nj) = (i as i64 + di, j as i64 + dj);
                        assert!(ni >= 0 && nj >= 0 && (ni as usize) < h && (nj as usize) < w);
                        let nv = m[[ni as usize, nj as usize]];
                        assert!(nv == 1 || nv == 2, "LVBP pixel ({i},{j}) touches label {nv}");
                    }
                }
            }
        }
    }

    #[test]
    fn systole_is_smaller_than_diastole() {
        let s = generate_subject(5, &a(), &PhantomParams::default()).unwrap();
        let count = |m: &Array2<Label>, l: Label| m.iter().filter(|&&v| v == l).count();
        assert!(count(&s.masks[1], 1) < count(&s.masks[0], 1));
    }

    #[test]
    fn oversized_heart_is_rejected() {
        let p = PhantomParams {
            heart_radius_range: (30.0, 40.0),
            ..PhantomParams::default()
        };
        assert!(matches!(generate_subject(1, &a(), &p), Err(PhantomError::InvalidParams(_))));
    }

    #[test]
    fn contraction_must_be_a_fraction() {
        let p = PhantomParams {
            ed_es_contraction: 1.0,
            ..PhantomParams::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn unknown_group_is_an_error() {
        let err = generate_subject(1, &Group::from("Z"), &PhantomParams::default()).unwrap_err();
        assert_eq!(err, PhantomError::UnknownGroup(Group::from("Z")));
    }

    #[test]
    fn identity_shift_is_bit_exact() {
        let s = generate_subject(3, &b(), &PhantomParams::default()).unwrap();
        assert_eq!(apply_domain_shift(&s, &DomainShift::identity()), s);
    }

    #[test]
    fn gain_and_bias_map_pointwise() {
        let s = generate_subject(3, &a(), &PhantomParams::default()).unwrap();
        let shift = DomainShift {
            gain: 1.2,
            bias: 10.0,
            ..DomainShift::identity()
        };
        let t = apply_domain_shift(&s, &shift);
        assert_eq!(t.masks, s.masks);
        for f in 0..2 {
            for (&p, &q) in s.frames[f].iter().zip(t.frames[f].iter()) {
                let want = (1.2 * p as f64 + 10.0).round().clamp(0.0, 65535.0) as u16;
                assert_eq!(q, want);
            }
        }
    }

    #[test]
    fn shift_records_new_spacing() {
        let s = generate_subject(3, &a(), &PhantomParams::default()).unwrap();
        let t = apply_domain_shift(&s, &DomainShift::default());
        assert_eq!(t.spacing_mm, 1.5);
        assert_ne!(t.frames, s.frames);
    }
}
