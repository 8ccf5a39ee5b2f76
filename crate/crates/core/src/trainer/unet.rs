//! Compact 2D U-Net: conv blocks (3x3 conv, instance norm, leaky ReLU, twice)
//! at each resolution level, max-pool down, transposed-conv up, skip
//! concatenation and a 1x1 class head.
//!
//! All parameters live in one flat vector so the optimizer, checkpoints and
//! finite-difference checks can treat the model as a point in R^n.

use super::layers::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::ops::Range;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    Instance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub num_classes: usize,
    /// Channel width per resolution level; `widths.len()` is the depth.
    pub widths: Vec<usize>,
    #[serde(default)]
    pub norm: NormKind,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(input_height: usize, input_width: usize, seed: u64) -> Self {
        ModelConfig {
            input_height,
            input_width,
            num_classes: crate::NUM_CLASSES,
            widths: vec![8, 16, 32, 32],
            norm: NormKind::Instance,
            seed,
        }
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    /// Spatial dims the network actually runs at: the input dims rounded up to
    /// a multiple of `2^depth`. Inputs are zero-padded bottom/right.
    pub fn working_dims(&self) -> (usize, usize) {
        let m = 1usize << self.depth();
        (
            self.input_height.div_ceil(m) * m,
            self.input_width.div_ceil(m) * m,
        )
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.depth() < 2 {
            return Err(format!("model depth must be >= 2, got {}", self.depth()));
        }
        if self.widths.contains(&0) {
            return Err("channel widths must be positive".into());
        }
        if self.num_classes < 2 {
            return Err("need at least two classes".into());
        }
        if self.input_height == 0 || self.input_width == 0 {
            return Err("input dims must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct BlockParams {
    cin: usize,
    cout: usize,
    conv_a: Range<usize>,
    gamma_a: Range<usize>,
    beta_a: Range<usize>,
    conv_b: Range<usize>,
    gamma_b: Range<usize>,
    beta_b: Range<usize>,
}

#[derive(Debug, Clone)]
struct UpParams {
    cin: usize,
    cout: usize,
    weight: Range<usize>,
    bias: Range<usize>,
}

#[derive(Debug, Clone)]
struct Layout {
    enc: Vec<BlockParams>,
    up: Vec<UpParams>,
    dec: Vec<BlockParams>,
    head_w: Range<usize>,
    head_b: Range<usize>,
    total: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let mut cursor = 0usize;
        let mut take = |n: usize| {
            let r = cursor..cursor + n;
            cursor += n;
            r
        };
        let block = |cin: usize, cout: usize, take: &mut dyn FnMut(usize) -> Range<usize>| BlockParams {
            cin,
            cout,
            conv_a: take(cout * cin * 9),
            gamma_a: take(cout),
            beta_a: take(cout),
            conv_b: take(cout * cout * 9),
            gamma_b: take(cout),
            beta_b: take(cout),
        };
        let w = &cfg.widths;
        let mut enc = Vec::new();
        for l in 0..w.len() {
            let cin = if l == 0 { 1 } else { w[l - 1] };
            enc.push(block(cin, w[l], &mut take));
        }
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for l in 0..w.len() - 1 {
            up.push(UpParams {
                cin: w[l + 1],
                cout: w[l],
                weight: take(w[l] * 4 * w[l + 1]),
                bias: take(w[l]),
            });
            dec.push(block(2 * w[l], w[l], &mut take));
        }
        let head_w = take(cfg.num_classes * w[0]);
        let head_b = take(cfg.num_classes);
        Layout {
            enc,
            up,
            dec,
            head_w,
            head_b,
            total: cursor,
        }
    }
}

struct BlockCache<T> {
    input: Vec<T>,
    norm_a: NormCache<T>,
    pre_a: Vec<T>,
    act_a: Vec<T>,
    norm_b: NormCache<T>,
    pre_b: Vec<T>,
}

/// Activations of one forward pass, needed for the backward pass.
pub struct ForwardCache<T> {
    enc: Vec<BlockCache<T>>,
    pool_arg: Vec<Vec<u32>>,
    up_in: Vec<Vec<T>>,
    dec: Vec<BlockCache<T>>,
    head_in: Vec<T>,
}

/// The network: architecture plus a flat parameter vector.
#[derive(Debug, Clone)]
pub struct UNet<T> {
    config: ModelConfig,
    layout: Layout,
    pub params: Vec<T>,
}

impl<T: Scalar> UNet<T> {
    /// He-normal conv weights, unit norm gains, zero biases.
    pub fn new(config: ModelConfig) -> Self {
        let layout = Layout::new(&config);
        let mut params = vec![T::zero(); layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut fill = |r: &Range<usize>, fan_in: usize, params: &mut [T]| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            for p in &mut params[r.clone()] {
                *p = T::lit(normal.sample(&mut rng));
            }
        };
        let init_block = |b: &BlockParams, params: &mut [T], fill: &mut dyn FnMut(&Range<usize>, usize, &mut [T])| {
            fill(&b.conv_a, b.cin * 9, params);
            fill(&b.conv_b, b.cout * 9, params);
            for r in [&b.gamma_a, &b.gamma_b] {
                params[r.clone()].fill(T::one());
            }
        };
        for l in 0..config.depth() {
            init_block(&layout.enc[l], &mut params, &mut fill);
        }
        for l in 0..config.depth() - 1 {
            let u = &layout.up[l];
            fill(&u.weight, u.cin, &mut params);
            init_block(&layout.dec[l], &mut params, &mut fill);
        }
        fill(&layout.head_w, config.widths[0], &mut params);
        UNet {
            config,
            layout,
            params,
        }
    }

    pub fn from_params(config: ModelConfig, params: Vec<T>) -> Result<Self, String> {
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(format!(
                "parameter count {} does not match architecture ({})",
                params.len(),
                layout.total
            ));
        }
        Ok(UNet {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    fn block_forward(&self, b: &BlockParams, input: Vec<T>, h: usize, w: usize) -> (Vec<T>, BlockCache<T>) {
        let p = &self.params;
        let hw = h * w;
        let z = conv3x3_forward(&input, b.cin, h, w, &p[b.conv_a.clone()], b.cout);
        let (pre_a, norm_a) = instance_norm_forward(&z, b.cout, hw, &p[b.gamma_a.clone()], &p[b.beta_a.clone()]);
        let act_a = leaky_relu(&pre_a);
        let z = conv3x3_forward(&act_a, b.cout, h, w, &p[b.conv_b.clone()], b.cout);
        let (pre_b, norm_b) = instance_norm_forward(&z, b.cout, hw, &p[b.gamma_b.clone()], &p[b.beta_b.clone()]);
        let out = leaky_relu(&pre_b);
        (
            out,
            BlockCache {
                input,
                norm_a,
                pre_a,
                act_a,
                norm_b,
                pre_b,
            },
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        b: &BlockParams,
        cache: &BlockCache<T>,
        h: usize,
        w: usize,
        mut grad: Vec<T>,
        grads: &mut [T],
        want_input_grad: bool,
    ) -> Option<Vec<T>> {
        let p = &self.params;
        let hw = h * w;
        leaky_relu_backward(&cache.pre_b, &mut grad);
        let (gg, gb) = split_two(grads, &b.gamma_b, &b.beta_b);
        let dz = instance_norm_backward(&cache.norm_b, b.cout, hw, &p[b.gamma_b.clone()], &grad, gg, gb);
        let mut dact = conv3x3_backward(
            &cache.act_a,
            b.cout,
            h,
            w,
            &p[b.conv_b.clone()],
            b.cout,
            &dz,
            &mut grads[b.conv_b.clone()],
            true,
        )
        .expect("input grad requested");
        leaky_relu_backward(&cache.pre_a, &mut dact);
        let (gg, gb) = split_two(grads, &b.gamma_a, &b.beta_a);
        let dz = instance_norm_backward(&cache.norm_a, b.cout, hw, &p[b.gamma_a.clone()], &dact, gg, gb);
        conv3x3_backward(
            &cache.input,
            b.cin,
            h,
            w,
            &p[b.conv_a.clone()],
            b.cout,
            &dz,
            &mut grads[b.conv_a.clone()],
            want_input_grad,
        )
    }

    /// Forward pass on one `[1, H, W]` image at working dims. Returns logits
    /// `[classes, H*W]`.
    pub fn forward(&self, image: &[T], h: usize, w: usize) -> (Vec<T>, ForwardCache<T>) {
        let depth = self.config.depth();
        assert_eq!(image.len(), h * w);
        assert!(h % (1 << (depth - 1)) == 0 && w % (1 << (depth - 1)) == 0);
        let mut enc_cache = Vec::with_capacity(depth);
        let mut enc_out = Vec::with_capacity(depth);
        let mut pool_arg = Vec::with_capacity(depth - 1);
        let mut x = image.to_vec();
        let (mut ch, mut cw) = (h, w);
        for l in 0..depth {
            let (out, cache) = self.block_forward(&self.layout.enc[l], x, ch, cw);
            enc_cache.push(cache);
            if l + 1 < depth {
                let (pooled, arg) = max_pool_forward(&out, self.layout.enc[l].cout, ch, cw);
                pool_arg.push(arg);
                x = pooled;
                ch /= 2;
                cw /= 2;
            } else {
                x = Vec::new();
            }
            enc_out.push(out);
        }
        let mut up_in: Vec<Vec<T>> = (0..depth - 1).map(|_| Vec::new()).collect();
        let mut dec_cache: Vec<Option<BlockCache<T>>> = (0..depth - 1).map(|_| None).collect();
        let mut current = enc_out.pop().expect("depth >= 2");
        for l in (0..depth - 1).rev() {
            let u = &self.layout.up[l];
            let up = up_conv_forward(
                &current,
                u.cin,
                ch,
                cw,
                &self.params[u.weight.clone()],
                &self.params[u.bias.clone()],
                u.cout,
            );
            up_in[l] = current;
            ch *= 2;
            cw *= 2;
            let mut cat = enc_out.pop().expect("one skip per level");
            cat.extend_from_slice(&up);
            let (out, cache) = self.block_forward(&self.layout.dec[l], cat, ch, cw);
            dec_cache[l] = Some(cache);
            current = out;
        }
        let _ = x;
        let logits = pointwise_forward(
            &current,
            self.config.widths[0],
            h * w,
            &self.params[self.layout.head_w.clone()],
            &self.params[self.layout.head_b.clone()],
            self.config.num_classes,
        );
        (
            logits,
            ForwardCache {
                enc: enc_cache,
                pool_arg,
                up_in,
                dec: dec_cache.into_iter().map(|c| c.expect("filled")).collect(),
                head_in: current,
            },
        )
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d logits`.
    pub fn backward(&self, cache: &ForwardCache<T>, h: usize, w: usize, grad_logits: &[T], grads: &mut [T]) {
        let depth = self.config.depth();
        assert_eq!(grads.len(), self.layout.total);
        let (gw, gb) = split_two(grads, &self.layout.head_w, &self.layout.head_b);
        let mut g = pointwise_backward(
            &cache.head_in,
            self.config.widths[0],
            h * w,
            &self.params[self.layout.head_w.clone()],
            self.config.num_classes,
            grad_logits,
            gw,
            gb,
        );
        let mut skip_grads: Vec<Vec<T>> = Vec::with_capacity(depth);
        let (mut ch, mut cw) = (h, w);
        for l in 0..depth - 1 {
            let b = &self.layout.dec[l];
            let dcat = self
                .block_backward(b, &cache.dec[l], ch, cw, g, grads, true)
                .expect("input grad requested");
            let split = self.config.widths[l] * ch * cw;
            skip_grads.push(dcat[..split].to_vec());
            let dup = &dcat[split..];
            let u = &self.layout.up[l];
            let (uw, ub) = split_two(grads, &u.weight, &u.bias);
            g = up_conv_backward(
                &cache.up_in[l],
                u.cin,
                ch / 2,
                cw / 2,
                &self.params[u.weight.clone()],
                u.cout,
                dup,
                uw,
                ub,
            );
            ch /= 2;
            cw /= 2;
        }
        // `g` is now the gradient w.r.t. the bottom encoder output.
        for l in (0..depth).rev() {
            if l < depth - 1 {
                let skip = std::mem::take(&mut skip_grads[l]);
                for (a, b) in g.iter_mut().zip(skip) {
                    *a += b;
                }
            }
            let want_input = l > 0;
            let dx = self.block_backward(&self.layout.enc[l], &cache.enc[l], ch, cw, g, grads, want_input);
            if l > 0 {
                let dx = dx.expect("input grad requested");
                let prev_len = self.layout.enc[l - 1].cout * ch * cw * 4;
                g = max_pool_backward(&cache.pool_arg[l - 1], &dx, prev_len);
                ch *= 2;
                cw *= 2;
            } else {
                g = Vec::new();
            }
        }
    }
}

fn split_two<'a, T>(v: &'a mut [T], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [T], &'a mut [T]) {
    assert!(a.end <= b.start, "ranges must be ordered and disjoint");
    let (left, right) = v.split_at_mut(b.start);
    (&mut left[a.clone()], &mut right[..b.len()])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            input_height: 8,
            input_width: 8,
            num_classes: 4,
            widths: vec![2, 4],
            norm: NormKind::Instance,
            seed: 3,
        }
    }

    #[test]
    fn tiny_model_stays_under_five_hundred_parameters() {
        let net = UNet::<f64>::new(tiny());
        assert!(net.num_params() <= 500, "{}", net.num_params());
    }

    #[test]
    fn default_model_parameter_count() {
        let net = UNet::<f32>::new(ModelConfig::new(128, 128, 0));
        assert!(net.num_params() > 50_000 && net.num_params() < 400_000, "{}", net.num_params());
    }

    #[test]
    fn logits_cover_every_pixel() {
        let net = UNet::<f32>::new(ModelConfig::new(32, 16, 1));
        let img: Vec<f32> = (0..32 * 16).map(|i| (i % 7) as f32).collect();
        let (logits, _) = net.forward(&img, 32, 16);
        assert_eq!(logits.len(), 4 * 32 * 16);
        assert!(logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn linear_probe_gradient_matches_finite_difference() {
        // loss = <logits, r> for a fixed r; checks backward in isolation.
        let net = UNet::<f64>::new(tiny());
        let img: Vec<f64> = (0..64).map(|i| ((i * 29) % 17) as f64 / 17.0).collect();
        let r: Vec<f64> = (0..4 * 64).map(|i| ((i as f64) * 0.61).sin()).collect();
        let loss = |net: &UNet<f64>| {
            let (lg, _) = net.forward(&img, 8, 8);
            lg.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = net.forward(&img, 8, 8);
        let mut grads = vec![0.0; net.num_params()];
        net.backward(&cache, 8, 8, &r, &mut grads);
        let mut probe = net.clone();
        for i in (0..net.num_params()).step_by(7) {
            let h = 1e-6;
            probe.params[i] = net.params[i] + h;
            let up = loss(&probe);
            probe.params[i] = net.params[i] - h;
            let down = loss(&probe);
            probe.params[i] = net.params[i];
            let fd = (up - down) / (2.0 * h);
            let denom = fd.abs().max(grads[i].abs()).max(1e-6);
            assert!((fd - grads[i]).abs() / denom < 1e-4, "param {i}: fd {fd} vs {}", grads[i]);
        }
    }
}
