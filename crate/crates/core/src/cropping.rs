//! Heart-centred cropping: bounding boxes, the fixed training crop size,
//! crop/paste with exact round trip, the two-stage cascaded pipeline and the
//! bounding-box size error.

use crate::Label;
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

/// Default per-side margin around the largest training heart.
pub const DEFAULT_BUFFER_PX: usize = 5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CropError {
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("crop {crop_height}x{crop_width} does not fit in image {height}x{width}")]
    ConfigTooLarge {
        crop_height: usize,
        crop_width: usize,
        height: usize,
        width: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate bounding box {0:?}")]
    DegenerateBox(BoundingBox),
}

/// Axis-aligned box, inclusive pixel bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub row_min: usize,
    pub row_max: usize,
    pub col_min: usize,
    pub col_max: usize,
}

impl BoundingBox {
    pub fn is_valid(&self) -> bool {
        self.row_min <= self.row_max && self.col_min <= self.col_max
    }

    pub fn height(&self) -> usize {
        self.row_max + 1 - self.row_min
    }

    pub fn width(&self) -> usize {
        self.col_max + 1 - self.col_min
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row_min..=self.row_max).contains(&row) && (self.col_min..=self.col_max).contains(&col)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropConfig {
    pub crop_height: usize,
    pub crop_width: usize,
    pub buffer_px: usize,
}

/// Where a crop came from, enough to paste a prediction back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRecord {
    pub source_height: usize,
    pub source_width: usize,
    pub origin_row: usize,
    pub origin_col: usize,
    pub crop_height: usize,
    pub crop_width: usize,
}

/// Tightest box around every pixel with a label above zero.
pub fn mask_bounding_box(mask: &Array2<Label>) -> Result<BoundingBox, CropError> {
    let mut bb: Option<BoundingBox> = None;
    for ((i, j), &v) in mask.indexed_iter() {
        if v == 0 {
            continue;
        }
        bb = Some(match bb {
            None => BoundingBox {
                row_min: i,
                row_max: i,
                col_min: j,
                col_max: j,
            },
            Some(b) => BoundingBox {
                row_min: b.row_min.min(i),
                row_max: b.row_max.max(i),
                col_min: b.col_min.min(j),
                col_max: b.col_max.max(j),
            },
        });
    }
    bb.ok_or(CropError::EmptyMask)
}

/// Largest training heart plus `buffer_px` on each side, clamped to the image.
pub fn training_crop_size<'a, I>(training_masks: I, buffer_px: usize) -> Result<CropConfig, CropError>
where
    I: IntoIterator<Item = &'a Array2<Label>>,
{
    let mut dims: Option<(usize, usize)> = None;
    let (mut h, mut w) = (0usize, 0usize);
    for m in training_masks {
        let b = mask_bounding_box(m)?;
        h = h.max(b.height());
        w = w.max(b.width());
        let (mh, mw) = m.dim();
        dims = Some(dims.map_or((mh, mw), |(dh, dw)| (dh.min(mh), dw.min(mw))));
    }
    let (ih, iw) = dims.ok_or(CropError::EmptyMask)?;
    Ok(CropConfig {
        crop_height: (h + 2 * buffer_px).min(ih),
        crop_width: (w + 2 * buffer_px).min(iw),
        buffer_px,
    })
}

/// Window origin along one axis: centred on the box, then shifted inside.
fn place(lo: usize, hi: usize, size: usize, extent: usize) -> usize {
    let start = (lo as i64 + hi as i64 + 1 - size as i64).div_euclid(2);
    start.clamp(0, (extent - size) as i64) as usize
}

/// Cuts a `config`-sized window centred on `center_box`, translated to lie
/// inside the image.
pub fn crop_around<A: Clone>(
    image: &Array2<A>,
    center_box: &BoundingBox,
    config: &CropConfig,
) -> Result<(Array2<A>, CropRecord), CropError> {
    let (h, w) = image.dim();
    if config.crop_height > h || config.crop_width > w || config.crop_height == 0 || config.crop_width == 0 {
        return Err(CropError::ConfigTooLarge {
            crop_height: config.crop_height,
            crop_width: config.crop_width,
            height: h,
            width: w,
        });
    }
    if !center_box.is_valid() {
        return Err(CropError::DegenerateBox(*center_box));
    }
    let origin_row = place(center_box.row_min, center_box.row_max, config.crop_height, h);
    let origin_col = place(center_box.col_min, center_box.col_max, config.crop_width, w);
    let crop = image
        .slice(s![
            origin_row..origin_row + config.crop_height,
            origin_col..origin_col + config.crop_width
        ])
        .to_owned();
    Ok((
        crop,
        CropRecord {
            source_height: h,
            source_width: w,
            origin_row,
            origin_col,
            crop_height: config.crop_height,
            crop_width: config.crop_width,
        },
    ))
}

/// Full-size label map: the crop inside its window, background elsewhere.
pub fn paste_back(cropped: &Array2<Label>, record: &CropRecord) -> Result<Array2<Label>, CropError> {
    if cropped.dim() != (record.crop_height, record.crop_width) {
        return Err(CropError::ShapeMismatch(format!(
            "crop is {:?}, record says {}x{}",
            cropped.dim(),
            record.crop_height,
            record.crop_width
        )));
    }
    let mut full = Array2::zeros((record.source_height, record.source_width));
    full.slice_mut(s![
        record.origin_row..record.origin_row + record.crop_height,
        record.origin_col..record.origin_col + record.crop_width
    ])
    .assign(cropped);
    Ok(full)
}

/// Box of the largest 8-connected foreground component. Remote false
/// positives of the first stage therefore do not stretch the crop.
pub fn largest_component_box(mask: &Array2<Label>) -> Option<BoundingBox> {
    let (h, w) = mask.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut best: Option<(usize, BoundingBox)> = None;
    let mut stack = Vec::new();
    for ((i, j), &v) in mask.indexed_iter() {
        if v == 0 || seen[[i, j]] {
            continue;
        }
        seen[[i, j]] = true;
        stack.push((i, j));
        let mut size = 0usize;
        let mut bb = BoundingBox {
            row_min: i,
            row_max: i,
            col_min: j,
            col_max: j,
        };
        while let Some((r, c)) = stack.pop() {
            size += 1;
            bb.row_min = bb.row_min.min(r);
            bb.row_max = bb.row_max.max(r);
            bb.col_min = bb.col_min.min(c);
            bb.col_max = bb.col_max.max(c);
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                        continue;
                    }
                    let (nr, nc) = (nr as usize, nc as usize);
                    if mask[[nr, nc]] > 0 && !seen[[nr, nc]] {
                        seen[[nr, nc]] = true;
                        stack.push((nr, nc));
                    }
                }
            }
        }
        // Ties keep the first component in raster order.
        if best.is_none_or(|(s, _)| size > s) {
            best = Some((size, bb));
        }
    }
    best.map(|(_, b)| b)
}

/// Result of the two-stage pipeline for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeOutput {
    pub labels: Array2<Label>,
    /// Stage 1 found no foreground; `labels` is its prediction unchanged.
    pub used_fallback: bool,
    pub stage1_box: Option<BoundingBox>,
    pub record: Option<CropRecord>,
}

/// Localize with `stage1` on the full image, crop around the predicted heart,
/// segment the crop with `stage2` and paste the result back.
pub fn cascaded_segment<A, F1, F2, E>(
    stage1: F1,
    stage2: F2,
    image: &Array2<A>,
    config: &CropConfig,
) -> Result<CascadeOutput, E>
where
    A: Clone,
    F1: FnOnce(&Array2<A>) -> Result<Array2<Label>, E>,
    F2: FnOnce(&Array2<A>) -> Result<Array2<Label>, E>,
    E: From<CropError>,
{
    let coarse = stage1(image)?;
    let Some(bb) = largest_component_box(&coarse) else {
        return Ok(CascadeOutput {
            labels: coarse,
            used_fallback: true,
            stage1_box: None,
            record: None,
        });
    };
    let (crop, record) = crop_around(image, &bb, config)?;
    let fine = stage2(&crop)?;
    let labels = paste_back(&fine, &record)?;
    Ok(CascadeOutput {
        labels,
        used_fallback: false,
        stage1_box: Some(bb),
        record: Some(record),
    })
}

/// Per-axis relative size error in percent, `(x, y)` = (width, height).
pub fn bbox_size_error(gt_box: &BoundingBox, pred_box: &BoundingBox) -> Result<(f64, f64), CropError> {
    for b in [gt_box, pred_box] {
        if !b.is_valid() {
            return Err(CropError::DegenerateBox(*b));
        }
    }
    let pct = |pred: usize, gt: usize| (pred as f64 - gt as f64).abs() / gt as f64 * 100.0;
    Ok((
        pct(pred_box.width(), gt_box.width()),
        pct(pred_box.height(), gt_box.height()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(r0: usize, r1: usize, c0: usize, c1: usize) -> BoundingBox {
        BoundingBox {
            row_min: r0,
            row_max: r1,
            col_min: c0,
            col_max: c1,
        }
    }

    #[test]
    fn box_of_two_pixels() {
        let mut m = Array2::<Label>::zeros((32, 32));
        m[[10, 5]] = 1;
        m[[20, 15]] = 3;
        assert_eq!(mask_bounding_box(&m).unwrap(), bb(10, 20, 5, 15));
    }

    #[test]
    fn box_of_one_pixel_and_of_nothing() {
        let mut m = Array2::<Label>::zeros((16, 16));
        assert_eq!(mask_bounding_box(&m), Err(CropError::EmptyMask));
        m[[3, 7]] = 2;
        assert_eq!(mask_bounding_box(&m).unwrap(), bb(3, 3, 7, 7));
    }

    fn rect_mask(h: usize, w: usize) -> Array2<Label> {
        let mut m = Array2::<Label>::zeros((64, 64));
        m.slice_mut(s![4..4 + h, 9..9 + w]).fill(1);
        m
    }

    #[test]
    fn crop_size_rule() {
        let masks = [rect_mask(11, 11), rect_mask(21, 9)];
        let c = training_crop_size(masks.iter(), 5).unwrap();
        assert_eq!((c.crop_height, c.crop_width), (31, 21));
        let c = training_crop_size([rect_mask(10, 10)].iter(), 5).unwrap();
        assert_eq!((c.crop_height, c.crop_width), (20, 20));
        let c = training_crop_size(masks.iter(), 0).unwrap();
        assert_eq!((c.crop_height, c.crop_width), (21, 11));
    }

    #[test]
    fn crop_size_is_clamped_to_the_image() {
        let m = Array2::<Label>::from_elem((16, 16), 1);
        let c = training_crop_size([&m], 5).unwrap();
        assert_eq!((c.crop_height, c.crop_width), (16, 16));
    }

    #[test]
    fn full_size_crop_is_the_image() {
        let img = Array2::from_shape_fn((20, 30), |(i, j)| (i * 30 + j) as u16);
        let cfg = CropConfig {
            crop_height: 20,
            crop_width: 30,
            buffer_px: 5,
        };
        let (c, rec) = crop_around(&img, &bb(3, 4, 8, 9), &cfg).unwrap();
        assert_eq!(c, img);
        assert_eq!((rec.origin_row, rec.origin_col), (0, 0));
    }

    #[test]
    fn oversized_crop_is_rejected() {
        let img = Array2::<u16>::zeros((20, 20));
        let cfg = CropConfig {
            crop_height: 21,
            crop_width: 5,
            buffer_px: 0,
        };
        assert!(matches!(
            crop_around(&img, &bb(0, 1, 0, 1), &cfg),
            Err(CropError::ConfigTooLarge { .. })
        ));
    }

    #[test]
    fn border_box_is_clamped() {
        let img = Array2::from_shape_fn((64, 64), |(i, j)| (i * 64 + j) as Label as u16);
        let cfg = CropConfig {
            crop_height: 31,
            crop_width: 31,
            buffer_px: 5,
        };
        // Box centre two pixels from the top-left corner.
        let (crop, rec) = crop_around(&img, &bb(1, 3, 1, 3), &cfg).unwrap();
        assert_eq!((rec.origin_row, rec.origin_col), (0, 0));
        assert_eq!(crop[[0, 0]], img[[0, 0]]);
        // Same near the bottom-right corner: origin = 64 - 31.
        let (_, rec) = crop_around(&img, &bb(60, 62, 60, 62), &cfg).unwrap();
        assert_eq!((rec.origin_row, rec.origin_col), (33, 33));
    }

    #[test]
    fn paste_of_single_pixel() {
        let rec = CropRecord {
            source_height: 12,
            source_width: 12,
            origin_row: 5,
            origin_col: 5,
            crop_height: 3,
            crop_width: 3,
        };
        let mut c = Array2::<Label>::zeros((3, 3));
        c[[1, 1]] = 2;
        let full = paste_back(&c, &rec).unwrap();
        assert_eq!(full[[6, 6]], 2);
        assert_eq!(full.iter().filter(|&&v| v > 0).count(), 1);
        assert!(paste_back(&Array2::zeros((3, 3)), &rec).unwrap().iter().all(|&v| v == 0));
        assert!(matches!(paste_back(&Array2::zeros((2, 3)), &rec), Err(CropError::ShapeMismatch(_))));
    }

    #[test]
    fn size_errors() {
        let gt = bb(0, 9, 0, 26);
        assert_eq!(bbox_size_error(&gt, &gt).unwrap(), (0.0, 0.0));
        let pred = bb(0, 9, 0, 27);
        let (x, y) = bbox_size_error(&gt, &pred).unwrap();
        assert!((x - 100.0 / 27.0).abs() < 1e-12 && y == 0.0);
        assert!((x - 3.70).abs() < 5e-3);
        let (x, _) = bbox_size_error(&bb(0, 0, 0, 19), &bb(0, 0, 0, 9)).unwrap();
        assert_eq!(x, 50.0);
        assert!(matches!(
            bbox_size_error(&bb(3, 2, 0, 1), &gt),
            Err(CropError::DegenerateBox(_))
        ));
    }

    #[test]
    fn largest_component_ignores_small_islands() {
        let mut m = Array2::<Label>::zeros((40, 40));
        m.slice_mut(s![10..20, 10..22]).fill(2);
        m.slice_mut(s![30..33, 30..33]).fill(1);
        assert_eq!(largest_component_box(&m), Some(bb(10, 19, 10, 21)));
        assert_eq!(largest_component_box(&Array2::<Label>::zeros((4, 4))), None);
    }

    fn oracle(gt: &Array2<Label>) -> impl Fn(&Array2<Label>) -> Result<Array2<Label>, CropError> + '_ {
        move |x: &Array2<Label>| {
            if x.dim() == gt.dim() {
                Ok(gt.clone())
            } else {
                Ok(x.clone())
            }
        }
    }

    #[test]
    fn cascade_with_oracles_reproduces_truth() {
        let mut gt = Array2::<Label>::zeros((64, 64));
        gt.slice_mut(s![20..35, 18..30]).fill(2);
        gt.slice_mut(s![24..31, 21..27]).fill(1);
        let cfg = CropConfig {
            crop_height: 25,
            crop_width: 22,
            buffer_px: 5,
        };
        // Feed the label map itself as the "image" so stage 2 can echo it.
        let out = cascaded_segment(oracle(&gt), |c: &Array2<Label>| Ok::<_, CropError>(c.clone()), &gt, &cfg).unwrap();
        assert!(!out.used_fallback);
        assert_eq!(out.labels, gt);
    }

    #[test]
    fn cascade_with_shifted_stage_one_keeps_truth_inside_the_window() {
        let mut gt = Array2::<Label>::zeros((64, 64));
        gt.slice_mut(s![20..36, 18..30]).fill(3);
        let mut shifted = Array2::<Label>::zeros((64, 64));
        shifted.slice_mut(s![22..38, 18..30]).fill(3);
        let cfg = CropConfig {
            crop_height: 16,
            crop_width: 20,
            buffer_px: 0,
        };
        let out = cascaded_segment(
            |_: &Array2<Label>| Ok::<_, CropError>(shifted.clone()),
            |c: &Array2<Label>| Ok(c.clone()),
            &gt,
            &cfg,
        )
        .unwrap();
        let rec = out.record.unwrap();
        let window = bb(
            rec.origin_row,
            rec.origin_row + rec.crop_height - 1,
            rec.origin_col,
            rec.origin_col + rec.crop_width - 1,
        );
        // Independent index arithmetic: box rows 22..=37, centre 29.5, 16-row window -> rows 22..=37.
        assert_eq!((window.row_min, window.row_max), (22, 37));
        for ((i, j), &v) in out.labels.indexed_iter() {
            let want = if window.contains(i, j) { gt[[i, j]] } else { 0 };
            assert_eq!(v, want);
        }
    }

    #[test]
    fn empty_stage_one_takes_fallback() {
        let img = Array2::<Label>::zeros((32, 32));
        let cfg = CropConfig {
            crop_height: 8,
            crop_width: 8,
            buffer_px: 0,
        };
        let out = cascaded_segment(
            |x: &Array2<Label>| Ok::<_, CropError>(x.clone()),
            |_: &Array2<Label>| panic!("stage 2 must not run"),
            &img,
            &cfg,
        )
        .unwrap();
        assert!(out.used_fallback);
        assert!(out.labels.iter().all(|&v| v == 0));
    }

    proptest! {
        #[test]
        fn crop_paste_round_trip(
            h in 8usize..48, w in 8usize..48,
            r0 in 0usize..48, c0 in 0usize..48, bh in 1usize..12, bw in 1usize..12,
            ch in 1usize..48, cw in 1usize..48, seed in any::<u64>(),
        ) {
            let (ch, cw) = (ch.min(h), cw.min(w));
            let (r0, c0) = (r0 % h, c0 % w);
            let b = bb(r0, (r0 + bh - 1).min(h - 1), c0, (c0 + bw - 1).min(w - 1));
            let img = Array2::from_shape_fn((h, w), |(i, j)| ((seed >> ((i * w + j) % 60)) as u8 ^ (i * 7 + j) as u8) % 4);
            let cfg = CropConfig { crop_height: ch, crop_width: cw, buffer_px: 0 };
            let (crop, rec) = crop_around(&img, &b, &cfg).unwrap();
            let back = paste_back(&crop, &rec).unwrap();
            for ((i, j), &v) in back.indexed_iter() {
                let inside = i >= rec.origin_row && i < rec.origin_row + ch && j >= rec.origin_col && j < rec.origin_col + cw;
                prop_assert_eq!(v, if inside { img[[i, j]] } else { 0 });
            }
        }
    }
}
