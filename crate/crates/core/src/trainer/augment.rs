//! Spatial augmentation: random flips and small in-plane rotations, applied
//! identically to an image and its label map.

use crate::Label;
use ndarray::Array2;
use rand::Rng;

/// Rotates about the array centre. Bilinear for the image, nearest for the
/// labels; samples falling outside are clamped to the border.
pub fn rotate(image: &Array2<f64>, mask: &Array2<Label>, angle_rad: f64) -> (Array2<f64>, Array2<Label>) {
    let (h, w) = image.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, c) = angle_rad.sin_cos();
    let src = |i: usize, j: usize| {
        let (y, x) = (i as f64 - cy, j as f64 - cx);
        (c * y + s * x + cy, -s * y + c * x + cx)
    };
    let clamp_y = |y: f64| y.clamp(0.0, (h - 1) as f64);
    let clamp_x = |x: f64| x.clamp(0.0, (w - 1) as f64);
    let img = Array2::from_shape_fn((h, w), |(i, j)| {
        let (y, x) = src(i, j);
        let (y, x) = (clamp_y(y), clamp_x(x));
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = image[[y0, x0]] * (1.0 - fx) + image[[y0, x1]] * fx;
        let bottom = image[[y1, x0]] * (1.0 - fx) + image[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    });
    let lab = Array2::from_shape_fn((h, w), |(i, j)| {
        let (y, x) = src(i, j);
        mask[[clamp_y(y).round() as usize, clamp_x(x).round() as usize]]
    });
    (img, lab)
}

/// Random horizontal/vertical flips and a rotation of at most `max_angle_deg`.
pub fn augment<R: Rng + ?Sized>(
    image: &Array2<f64>,
    mask: &Array2<Label>,
    max_angle_deg: f64,
    rng: &mut R,
) -> (Array2<f64>, Array2<Label>) {
    let flip_rows = rng.random::<bool>();
    let flip_cols = rng.random::<bool>();
    let angle = if max_angle_deg > 0.0 {
        rng.random_range(-max_angle_deg..max_angle_deg).to_radians()
    } else {
        0.0
    };
    let (mut img, mut lab) = (image.clone(), mask.clone());
    if flip_rows {
        img.invert_axis(ndarray::Axis(0));
        lab.invert_axis(ndarray::Axis(0));
    }
    if flip_cols {
        img.invert_axis(ndarray::Axis(1));
        lab.invert_axis(ndarray::Axis(1));
    }
    if angle != 0.0 {
        return rotate(&img.as_standard_layout().to_owned(), &lab.as_standard_layout().to_owned(), angle);
    }
    (img.as_standard_layout().to_owned(), lab.as_standard_layout().to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rotation_is_identity() {
        let img = Array2::from_shape_fn((9, 7), |(i, j)| (i * 7 + j) as f64);
        let lab = img.mapv(|v| (v as u8) % 4);
        let (a, b) = rotate(&img, &lab, 0.0);
        assert_eq!(a, img);
        assert_eq!(b, lab);
    }

    #[test]
    fn quarter_turn_moves_pixels() {
        let mut lab = Array2::<Label>::zeros((5, 5));
        lab[[0, 2]] = 1;
        let img = lab.mapv(f64::from);
        let (a, b) = rotate(&img, &lab, std::f64::consts::FRAC_PI_2);
        assert_eq!(b.iter().filter(|&&v| v == 1).count(), 1);
        assert_eq!(b[[0, 2]], 0);
        assert!((a.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn labels_stay_valid() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let lab = Array2::from_shape_fn((16, 16), |(i, j)| ((i / 4 + j / 4) % 4) as Label);
        let img = lab.mapv(f64::from);
        for _ in 0..10 {
            let (_, b) = augment(&img, &lab, 15.0, &mut rng);
            assert!(b.iter().all(|&v| v < 4));
        }
    }
}
