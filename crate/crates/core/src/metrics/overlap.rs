//! Dice overlap and Hausdorff distance of single labels.

use super::MetricsError;
use crate::Label;
use ndarray::Array2;

fn check_dims(pred: &Array2<Label>, gt: &Array2<Label>) -> Result<(), MetricsError> {
    if pred.dim() != gt.dim() {
        return Err(MetricsError::ShapeMismatch(format!("{:?} vs {:?}", pred.dim(), gt.dim())));
    }
    Ok(())
}

/// `2|P ∩ G| / (|P| + |G|)` for one label; 1.0 when both sets are empty.
pub fn dice(pred: &Array2<Label>, gt: &Array2<Label>, label: Label) -> Result<f64, MetricsError> {
    check_dims(pred, gt)?;
    let (mut both, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt.iter()) {
        let (ia, ib) = (a == label, b == label);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let mut q = 1;
    while q < n {
        if f[q].is_infinite() {
            q += 1;
            continue;
        }
        if f[v[k]].is_infinite() {
            v[k] = q;
            q += 1;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
        q += 1;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *o = if f[p].is_infinite() {
            f64::INFINITY
        } else {
            (q as f64 - p as f64).powi(2) + f[p]
        };
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest `true` pixel.
pub fn squared_distance_transform(set: &Array2<bool>) -> Array2<f64> {
    let (h, w) = set.dim();
    let mut d = set.mapv(|b| if b { 0.0 } else { f64::INFINITY });
    let n = h.max(w);
    let (mut f, mut out, mut v, mut z) = (vec![0.0; n], vec![0.0; n], vec![0usize; n], vec![0.0; n + 1]);
    for i in 0..h {
        for j in 0..w {
            f[j] = d[[i, j]];
        }
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        for j in 0..w {
            d[[i, j]] = out[j];
        }
    }
    for j in 0..w {
        for i in 0..h {
            f[i] = d[[i, j]];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for i in 0..h {
            d[[i, j]] = out[i];
        }
    }
    d
}

fn directed(from: &Array2<bool>, to_dt: &Array2<f64>) -> f64 {
    from.iter()
        .zip(to_dt.iter())
        .filter(|(&b, _)| b)
        .map(|(_, &d)| d)
        .fold(0.0, f64::max)
}

/// Symmetric Hausdorff distance between the pixel centres of `label` in the
/// two maps, in millimetres. `None` when either set is empty.
pub fn hausdorff(pred: &Array2<Label>, gt: &Array2<Label>, label: Label, spacing_mm: f64) -> Result<Option<f64>, MetricsError> {
    check_dims(pred, gt)?;
    let p = pred.mapv(|x| x == label);
    let g = gt.mapv(|x| x == label);
    if !p.iter().any(|&b| b) || !g.iter().any(|&b| b) {
        return Ok(None);
    }
    let d2 = directed(&p, &squared_distance_transform(&g)).max(directed(&g, &squared_distance_transform(&p)));
    Ok(Some(d2.sqrt() * spacing_mm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dice_examples() {
        let mut a = Array2::<Label>::zeros((6, 6));
        let mut b = Array2::<Label>::zeros((6, 6));
        a[[0, 0]] = 1;
        a[[0, 1]] = 1;
        a[[1, 0]] = 1;
        a[[1, 1]] = 1;
        b[[0, 1]] = 1;
        b[[1, 1]] = 1;
        b[[0, 2]] = 1;
        b[[1, 2]] = 1;
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.5);
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dice(&a, &b, 2).unwrap(), 1.0);
        let mut c = Array2::<Label>::zeros((6, 6));
        c[[5, 5]] = 1;
        assert_eq!(dice(&a, &c, 1).unwrap(), 0.0);
        assert!(dice(&a, &Array2::zeros((5, 6)), 1).is_err());
    }

    #[test]
    fn hausdorff_examples() {
        let mut a = Array2::<Label>::zeros((8, 8));
        let mut b = Array2::<Label>::zeros((8, 8));
        a[[0, 0]] = 2;
        b[[3, 4]] = 2;
        assert_eq!(hausdorff(&a, &b, 2, 1.0).unwrap(), Some(5.0));
        assert!((hausdorff(&a, &b, 2, 1.8).unwrap().unwrap() - 9.0).abs() < 1e-12);
        assert_eq!(hausdorff(&a, &a, 2, 1.0).unwrap(), Some(0.0));
        assert_eq!(hausdorff(&a, &b, 1, 1.0).unwrap(), None);
    }

    fn brute(set: &Array2<bool>) -> Array2<f64> {
        let pts: Vec<(usize, usize)> = set.indexed_iter().filter(|(_, &b)| b).map(|(p, _)| p).collect();
        Array2::from_shape_fn(set.dim(), |(i, j)| {
            pts.iter()
                .map(|&(a, b)| (i as f64 - a as f64).powi(2) + (j as f64 - b as f64).powi(2))
                .fold(f64::INFINITY, f64::min)
        })
    }

    proptest! {
        #[test]
        fn distance_transform_matches_brute_force(h in 1usize..14, w in 1usize..14, bits in prop::collection::vec(any::<u8>(), 196)) {
            let set = Array2::from_shape_fn((h, w), |(i, j)| bits[i * 14 + j] < 40);
            prop_assert_eq!(squared_distance_transform(&set), brute(&set));
        }
    }
}
