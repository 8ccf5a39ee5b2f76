//! Per-sample building blocks of the encoder-decoder: 3x3 convolution,
//! instance normalization, leaky ReLU, 2x2 max pooling, 2x2 transposed
//! convolution and the 1x1 output head.
//!
//! Feature maps are channel-major `[C, H, W]` slices. Every backward function
//! accumulates (`+=`) into its parameter gradient slice and writes the input
//! gradient.

use num_traits::Float;
use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

pub trait Scalar: Float + AddAssign + Sum + Debug + Default + Send + Sync + 'static {
    /// Row-major strided GEMM: `C = alpha * A * B + beta * C`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );

    fn lit(x: f64) -> Self {
        Self::from(x).expect("finite literal")
    }
}

impl Scalar for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        (rsa, csa): (isize, isize),
        b: &[f32],
        (rsb, csb): (isize, isize),
        beta: f32,
        c: &mut [f32],
    ) {
        assert!(c.len() >= m * n);
        // SAFETY: strides and sizes are checked by `matmul`, which is the only caller.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            )
        }
    }
}

impl Scalar for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        (rsa, csa): (isize, isize),
        b: &[f64],
        (rsb, csb): (isize, isize),
        beta: f64,
        c: &mut [f64],
    ) {
        assert!(c.len() >= m * n);
        // SAFETY: see the f32 impl.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            )
        }
    }
}

/// `C (m x n) = op(A) * op(B) + beta * C`, all row-major and contiguous.
/// With `a_t`, `A` is stored as `k x m`; with `b_t`, `B` is stored as `n x k`.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let a_strides = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let b_strides = if b_t { (1, k as isize) } else { (n as isize, 1) };
    T::gemm(m, k, n, T::one(), a, a_strides, b, b_strides, beta, c);
}

/// Output pixels computed together by the convolution kernels.
const BLOCK: usize = 32;

/// Geometry of the padded layout used by the convolution kernels.
///
/// Inputs are padded by one zero pixel on every side, so the 3x3 tap `k`
/// reads the padded plane at a fixed shift `tap(k)`. Outputs live in a "wide"
/// layout with row stride `pw`, whose two trailing columns per row are junk,
/// rounded up to a whole number of blocks.
struct Padded {
    h: usize,
    w: usize,
    pw: usize,
    plane: usize,
    wide: usize,
}

impl Padded {
    fn new(h: usize, w: usize) -> Self {
        let pw = w + 2;
        let len = (h - 1) * pw + w;
        Padded { h, w, pw, plane: (h + 2) * pw, wide: len.div_ceil(BLOCK) * BLOCK }
    }

    fn tap(&self, k: usize) -> usize {
        (k / 3) * self.pw + k % 3
    }

    /// The last block may read up to `BLOCK` elements past the final plane.
    fn pad<T: Scalar>(&self, input: &[T], channels: usize) -> Vec<T> {
        let mut out = vec![T::zero(); channels * self.plane + BLOCK];
        for c in 0..channels {
            for y in 0..self.h {
                let src = &input[(c * self.h + y) * self.w..][..self.w];
                out[c * self.plane + (y + 1) * self.pw + 1..][..self.w].copy_from_slice(src);
            }
        }
        out
    }

    fn from_wide<T: Scalar>(&self, wide: &[T], channels: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(channels * self.h * self.w);
        for c in 0..channels {
            for y in 0..self.h {
                out.extend_from_slice(&wide[c * self.wide + y * self.pw..][..self.w]);
            }
        }
        out
    }
}

fn block<T>(v: &[T], at: usize) -> &[T; BLOCK] {
    v[at..at + BLOCK].try_into().expect("block in bounds")
}

/// `out[co] = sum_ci sum_k w[co, ci, k] * shift_k(xp[ci])` in the wide layout.
fn correlate<T: Scalar>(xp: &[T], cin: usize, g: &Padded, weight: &[T], cout: usize) -> Vec<T> {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the required CPU feature was detected at runtime.
        return unsafe { correlate_avx2(xp, cin, g, weight, cout) };
    }
    correlate_kernel(xp, cin, g, weight, cout)
}

/// The same kernel compiled for wider vectors. Every output element is
/// accumulated in the same order, so results match the portable build.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn correlate_avx2<T: Scalar>(xp: &[T], cin: usize, g: &Padded, weight: &[T], cout: usize) -> Vec<T> {
    correlate_kernel(xp, cin, g, weight, cout)
}

#[inline(always)]
fn correlate_kernel<T: Scalar>(xp: &[T], cin: usize, g: &Padded, weight: &[T], cout: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cout * g.wide];
    for co in 0..cout {
        let w_co = &weight[co * cin * 9..][..cin * 9];
        for jb in (0..g.wide).step_by(BLOCK) {
            let mut acc = [T::zero(); BLOCK];
            for ci in 0..cin {
                for k in 0..9 {
                    let wv = w_co[ci * 9 + k];
                    let xs = block(xp, ci * g.plane + g.tap(k) + jb);
                    for t in 0..BLOCK {
                        acc[t] += wv * xs[t];
                    }
                }
            }
            out[co * g.wide + jb..][..BLOCK].copy_from_slice(&acc);
        }
    }
    out
}

/// Unfolds every 3x3 neighbourhood into a `[cin * 9, h * w]` matrix.
fn im2col<T: Scalar>(input: &[T], channels: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut cols = vec![T::zero(); channels * 9 * hw];
    for c in 0..channels {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

/// 3x3 convolution, zero padding 1, no bias (always followed by a norm).
/// `weight` is `[cout, cin, 3, 3]`.
pub fn conv3x3_forward<T: Scalar>(
    input: &[T],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    cout: usize,
) -> Vec<T> {
    let g = Padded::new(h, w);
    let wide = correlate(&g.pad(input, cin), cin, &g, weight, cout);
    g.from_wide(&wide, cout)
}

#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward<T: Scalar>(
    input: &[T],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    cout: usize,
    grad_out: &[T],
    grad_weight: &mut [T],
    want_input_grad: bool,
) -> Option<Vec<T>> {
    let g = Padded::new(h, w);
    let cols = im2col(input, cin, h, w);
    // dW += dY * cols^T
    matmul(cout, h * w, cin * 9, grad_out, false, &cols, true, T::one(), grad_weight);
    if !want_input_grad {
        return None;
    }
    // The input gradient correlates the padded output gradient with the
    // spatially flipped, channel-transposed kernel.
    let mut flipped = vec![T::zero(); weight.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for k in 0..9 {
                flipped[(ci * cout + co) * 9 + k] = weight[(co * cin + ci) * 9 + 8 - k];
            }
        }
    }
    let dyp = g.pad(grad_out, cout);
    let wide = correlate(&dyp, cout, &g, &flipped, cin);
    Some(g.from_wide(&wide, cin))
}

pub const NORM_EPS: f64 = 1e-5;

/// Cached statistics of an instance-norm application.
pub struct NormCache<T> {
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
}

pub fn instance_norm_forward<T: Scalar>(
    input: &[T],
    channels: usize,
    hw: usize,
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, NormCache<T>) {
    let n = T::lit(hw as f64);
    let eps = T::lit(NORM_EPS);
    let mut out = vec![T::zero(); input.len()];
    let mut normalized = vec![T::zero(); input.len()];
    let mut inv_std = vec![T::zero(); channels];
    for c in 0..channels {
        let x = &input[c * hw..(c + 1) * hw];
        let mean = x.iter().copied().sum::<T>() / n;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        inv_std[c] = is;
        let xn = &mut normalized[c * hw..(c + 1) * hw];
        let y = &mut out[c * hw..(c + 1) * hw];
        for i in 0..hw {
            xn[i] = (x[i] - mean) * is;
            y[i] = gamma[c] * xn[i] + beta[c];
        }
    }
    (out, NormCache { normalized, inv_std })
}

pub fn instance_norm_backward<T: Scalar>(
    cache: &NormCache<T>,
    channels: usize,
    hw: usize,
    gamma: &[T],
    grad_out: &[T],
    grad_gamma: &mut [T],
    grad_beta: &mut [T],
) -> Vec<T> {
    let n = T::lit(hw as f64);
    let mut grad_in = vec![T::zero(); grad_out.len()];
    for c in 0..channels {
        let dy = &grad_out[c * hw..(c + 1) * hw];
        let xn = &cache.normalized[c * hw..(c + 1) * hw];
        let sum_dy = dy.iter().copied().sum::<T>();
        let sum_dy_xn = dy.iter().zip(xn).map(|(&a, &b)| a * b).sum::<T>();
        grad_gamma[c] += sum_dy_xn;
        grad_beta[c] += sum_dy;
        let scale = gamma[c] * cache.inv_std[c];
        let mean_dy = sum_dy / n;
        let mean_dy_xn = sum_dy_xn / n;
        let dx = &mut grad_in[c * hw..(c + 1) * hw];
        for i in 0..hw {
            dx[i] = scale * (dy[i] - mean_dy - xn[i] * mean_dy_xn);
        }
    }
    grad_in
}

pub const LEAKY_SLOPE: f64 = 0.01;

pub fn leaky_relu<T: Scalar>(x: &[T]) -> Vec<T> {
    let s = T::lit(LEAKY_SLOPE);
    x.iter()
        .map(|&v| if v > T::zero() { v } else { v * s })
        .collect()
}

/// `pre` is the activation input.
pub fn leaky_relu_backward<T: Scalar>(pre: &[T], grad_out: &mut [T]) {
    let s = T::lit(LEAKY_SLOPE);
    for (g, &p) in grad_out.iter_mut().zip(pre) {
        if p <= T::zero() {
            *g = *g * s;
        }
    }
}

/// 2x2 max pooling with stride 2. Returns the pooled map and, per output
/// element, the flat input index of the winner.
pub fn max_pool_forward<T: Scalar>(
    input: &[T],
    channels: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![T::zero(); channels * oh * ow];
    let mut arg = vec![0u32; channels * oh * ow];
    for c in 0..channels {
        for y in 0..oh {
            for x in 0..ow {
                let base = c * h * w + 2 * y * w + 2 * x;
                let mut best = base;
                for cand in [base + 1, base + w, base + w + 1] {
                    if input[cand] > input[best] {
                        best = cand;
                    }
                }
                let o = c * oh * ow + y * ow + x;
                out[o] = input[best];
                arg[o] = best as u32;
            }
        }
    }
    (out, arg)
}

pub fn max_pool_backward<T: Scalar>(argmax: &[u32], grad_out: &[T], input_len: usize) -> Vec<T> {
    let mut grad_in = vec![T::zero(); input_len];
    for (&i, &g) in argmax.iter().zip(grad_out) {
        grad_in[i as usize] += g;
    }
    grad_in
}

/// 2x2 transposed convolution with stride 2. `weight` is `[cout*4, cin]`,
/// row `(co*4 + dy*2 + dx)`.
pub fn up_conv_forward<T: Scalar>(
    input: &[T],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    bias: &[T],
    cout: usize,
) -> Vec<T> {
    let hw = h * w;
    let mut tmp = vec![T::zero(); cout * 4 * hw];
    matmul(cout * 4, cin, hw, weight, false, input, false, T::zero(), &mut tmp);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); cout * oh * ow];
    for co in 0..cout {
        for k in 0..4 {
            let (dy, dx) = (k / 2, k % 2);
            let src = &tmp[(co * 4 + k) * hw..][..hw];
            for y in 0..h {
                for x in 0..w {
                    out[co * oh * ow + (2 * y + dy) * ow + 2 * x + dx] = src[y * w + x] + bias[co];
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn up_conv_backward<T: Scalar>(
    input: &[T],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    cout: usize,
    grad_out: &[T],
    grad_weight: &mut [T],
    grad_bias: &mut [T],
) -> Vec<T> {
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let mut dtmp = vec![T::zero(); cout * 4 * hw];
    for co in 0..cout {
        let mut bsum = T::zero();
        for k in 0..4 {
            let (dy, dx) = (k / 2, k % 2);
            let dst = &mut dtmp[(co * 4 + k) * hw..][..hw];
            for y in 0..h {
                for x in 0..w {
                    let g = grad_out[co * oh * ow + (2 * y + dy) * ow + 2 * x + dx];
                    dst[y * w + x] = g;
                    bsum += g;
                }
            }
        }
        grad_bias[co] += bsum;
    }
    matmul(cout * 4, hw, cin, &dtmp, false, input, true, T::one(), grad_weight);
    let mut grad_in = vec![T::zero(); cin * hw];
    matmul(cin, cout * 4, hw, weight, true, &dtmp, false, T::zero(), &mut grad_in);
    grad_in
}

/// 1x1 convolution with bias. `weight` is `[cout, cin]`.
pub fn pointwise_forward<T: Scalar>(
    input: &[T],
    cin: usize,
    hw: usize,
    weight: &[T],
    bias: &[T],
    cout: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); cout * hw];
    for co in 0..cout {
        out[co * hw..(co + 1) * hw].fill(bias[co]);
    }
    matmul(cout, cin, hw, weight, false, input, false, T::one(), &mut out);
    out
}

#[allow(clippy::too_many_arguments)]
pub fn pointwise_backward<T: Scalar>(
    input: &[T],
    cin: usize,
    hw: usize,
    weight: &[T],
    cout: usize,
    grad_out: &[T],
    grad_weight: &mut [T],
    grad_bias: &mut [T],
) -> Vec<T> {
    for co in 0..cout {
        grad_bias[co] += grad_out[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
    }
    matmul(cout, hw, cin, grad_out, false, input, true, T::one(), grad_weight);
    let mut grad_in = vec![T::zero(); cin * hw];
    matmul(cin, cout, hw, weight, true, grad_out, false, T::zero(), &mut grad_in);
    grad_in
}
