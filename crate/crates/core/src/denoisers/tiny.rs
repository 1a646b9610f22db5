//! A three-level convolutional UNet with cross-attention over text tokens.
//!
//! Encoder level `l` is `conv3×3 + time bias → SiLU → cross-attention`,
//! exposed as site `e{l}`. Decoder level `l` convolves the upsampled deeper
//! output concatenated with the encoder skip, adds a control embedding
//! derived from the pooled pose map, applies cross-attention and exposes
//! site `d{l}`. The head is a 1×1 convolution plus a time-dependent
//! per-channel gain on `x_t`; both start at zero.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layers::{
    add_channel_bias, add_channel_bias_backward, conv2d, conv2d_backward, silu, silu_grad,
    AttnCache, CrossAttention, Param,
};
use super::{check_shape, Conditioning, DenoiseError, Denoiser, SiteHooks, SiteInfo, SiteStage};
use crate::diffusion::NoiseSchedule;
use crate::tensor::Tensor;

pub const LEVELS: usize = 3;
pub const TIME_FEATURES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TinyConfig {
    /// Feature channels at full, 1/2 and 1/4 resolution.
    pub channels: [usize; LEVELS],
    /// Query/key width of every attention block.
    pub attn_dim: usize,
    pub text_dim: usize,
    /// Kernel side of the full-resolution decoder convolution.
    pub top_decoder_kernel: usize,
}

impl Default for TinyConfig {
    fn default() -> Self {
        Self {
            channels: [8, 12, 24],
            attn_dim: 8,
            text_dim: 16,
            top_decoder_kernel: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub w: Param,
    pub b: Param,
    /// Time-feature projection added as a per-channel bias, `[co, TIME_FEATURES]`.
    pub wt: Param,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnBlock {
    pub wq: Param,
    pub wk: Param,
    pub wv: Param,
    pub bv: Param,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlBlock {
    pub w: Param,
    pub b: Param,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadBlock {
    pub w: Param,
    pub b: Param,
    pub gain_w: Param,
    pub gain_b: Param,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyParams {
    pub config: TinyConfig,
    pub enc_conv: Vec<ConvBlock>,
    pub enc_attn: Vec<AttnBlock>,
    pub dec_conv: Vec<ConvBlock>,
    pub dec_ctrl: Vec<ControlBlock>,
    pub dec_attn: Vec<AttnBlock>,
    pub head: HeadBlock,
}

impl TinyParams {
    /// Random hidden layers and a zero head, so the initial prediction is zero.
    pub fn init(config: TinyConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let conv = |ci: usize, co: usize, k: usize, rng: &mut ChaCha8Rng| ConvBlock {
            w: Param::randn(&[co, ci, k, k], (1.0 / (ci * k * k) as f64).sqrt(), rng),
            b: Param::zeros(&[co]),
            wt: Param::randn(&[co, TIME_FEATURES], 0.1, rng),
        };
        let attn = |ch: usize, rng: &mut ChaCha8Rng| AttnBlock {
            wq: Param::randn(&[config.attn_dim, ch], (1.0 / ch as f64).sqrt(), rng),
            wk: Param::randn(&[config.attn_dim, config.text_dim], 1.0, rng),
            wv: Param::randn(&[ch, config.text_dim], 0.5, rng),
            bv: Param::zeros(&[ch]),
        };
        let enc_in = [3, c[0], c[1]];
        let enc_conv = (0..LEVELS)
            .map(|l| conv(enc_in[l], c[l], 3, &mut rng))
            .collect();
        let enc_attn = (0..LEVELS).map(|l| attn(c[l], &mut rng)).collect();
        let dec_conv = (0..LEVELS)
            .map(|l| {
                let (ci, k) = match l {
                    2 => (c[2], 3),
                    0 => (c[1] + c[0], config.top_decoder_kernel),
                    _ => (c[2] + c[1], 3),
                };
                conv(ci, c[l], k, &mut rng)
            })
            .collect();
        let dec_ctrl = (0..LEVELS)
            .map(|l| ControlBlock {
                w: Param::randn(&[c[l]], 1.0, &mut rng),
                b: Param::zeros(&[c[l]]),
            })
            .collect();
        let dec_attn = (0..LEVELS).map(|l| attn(c[l], &mut rng)).collect();
        Self {
            config,
            enc_conv,
            enc_attn,
            dec_conv,
            dec_ctrl,
            dec_attn,
            head: HeadBlock {
                w: Param::zeros(&[3, c[0], 1, 1]),
                b: Param::zeros(&[3]),
                gain_w: Param::zeros(&[3, TIME_FEATURES]),
                gain_b: Param::zeros(&[3]),
            },
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, p) in z.named_mut() {
            p.data.fill(0.0);
        }
        z
    }

    /// Every parameter tensor with a stable dotted name.
    pub fn named(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        for (l, b) in self.enc_conv.iter().enumerate() {
            out.push((format!("enc{l}.conv.w"), &b.w));
            out.push((format!("enc{l}.conv.b"), &b.b));
            out.push((format!("enc{l}.conv.wt"), &b.wt));
        }
        for (l, b) in self.enc_attn.iter().enumerate() {
            out.extend(attn_named(&format!("enc{l}"), b));
        }
        for (l, b) in self.dec_conv.iter().enumerate() {
            out.push((format!("dec{l}.conv.w"), &b.w));
            out.push((format!("dec{l}.conv.b"), &b.b));
            out.push((format!("dec{l}.conv.wt"), &b.wt));
        }
        for (l, b) in self.dec_ctrl.iter().enumerate() {
            out.push((format!("dec{l}.ctrl.w"), &b.w));
            out.push((format!("dec{l}.ctrl.b"), &b.b));
        }
        for (l, b) in self.dec_attn.iter().enumerate() {
            out.extend(attn_named(&format!("dec{l}"), b));
        }
        out.push(("head.w".into(), &self.head.w));
        out.push(("head.b".into(), &self.head.b));
        out.push(("head.gain_w".into(), &self.head.gain_w));
        out.push(("head.gain_b".into(), &self.head.gain_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Param)> {
        let names: Vec<String> = self.named().into_iter().map(|(n, _)| n).collect();
        let mut refs: Vec<&mut Param> = Vec::new();
        for b in self.enc_conv.iter_mut() {
            refs.extend([&mut b.w, &mut b.b, &mut b.wt]);
        }
        for b in self.enc_attn.iter_mut() {
            refs.extend([&mut b.wq, &mut b.wk, &mut b.wv, &mut b.bv]);
        }
        for b in self.dec_conv.iter_mut() {
            refs.extend([&mut b.w, &mut b.b, &mut b.wt]);
        }
        for b in self.dec_ctrl.iter_mut() {
            refs.extend([&mut b.w, &mut b.b]);
        }
        for b in self.dec_attn.iter_mut() {
            refs.extend([&mut b.wq, &mut b.wk, &mut b.wv, &mut b.bv]);
        }
        let h = &mut self.head;
        refs.extend([&mut h.w, &mut h.b, &mut h.gain_w, &mut h.gain_b]);
        names.into_iter().zip(refs).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, p)| p.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named()
            .iter()
            .all(|(_, p)| p.data.iter().all(|v| v.is_finite()))
    }
}

fn attn_named<'a>(prefix: &str, b: &'a AttnBlock) -> Vec<(String, &'a Param)> {
    vec![
        (format!("{prefix}.attn.wq"), &b.wq),
        (format!("{prefix}.attn.wk"), &b.wk),
        (format!("{prefix}.attn.wv"), &b.wv),
        (format!("{prefix}.attn.bv"), &b.bv),
    ]
}

impl AttnBlock {
    fn op(&self) -> CrossAttention<'_> {
        CrossAttention {
            wq: &self.wq,
            wk: &self.wk,
            wv: &self.wv,
            bv: &self.bv,
        }
    }
}

/// Time features `[√ᾱ, √(1−ᾱ), sin/cos(πu), sin/cos(2πu), sin/cos(4πu)]`, `u = t/T`.
pub fn time_features(t: usize, sched: &NoiseSchedule) -> [f64; TIME_FEATURES] {
    let a = sched.alpha_bar(t);
    let u = std::f64::consts::PI * t as f64 / sched.horizon() as f64;
    [
        a.sqrt(),
        (1.0 - a).sqrt(),
        u.sin(),
        u.cos(),
        (2.0 * u).sin(),
        (2.0 * u).cos(),
        (4.0 * u).sin(),
        (4.0 * u).cos(),
    ]
}

/// Intermediate values of one branch, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    x_t: Tensor,
    features: [f64; TIME_FEATURES],
    enc_in: Vec<Tensor>,
    enc_pre: Vec<Tensor>,
    enc_attn: Vec<AttnCache>,
    enc_out: Vec<Tensor>,
    dec_in: Vec<Tensor>,
    dec_pre: Vec<Tensor>,
    dec_attn: Vec<AttnCache>,
    pose: Vec<Tensor>,
    head_in: Tensor,
}

#[derive(Debug, Clone)]
pub struct TinyDenoiser {
    params: TinyParams,
    schedule: NoiseSchedule,
}

impl TinyDenoiser {
    pub fn new(params: TinyParams, schedule: NoiseSchedule) -> Self {
        Self { params, schedule }
    }

    pub fn params(&self) -> &TinyParams {
        &self.params
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn check_canvas(&self, x_t: &Tensor) -> Result<(), DenoiseError> {
        let (h, w) = x_t.spatial();
        if x_t.channels() != 3 || h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(DenoiseError::ShapeMismatch {
                expected: (3, h - h % 4, w - w % 4),
                got: x_t.shape(),
            });
        }
        Ok(())
    }

    /// Lockstep forward pass; caches intermediates when `keep` is set.
    pub fn forward(
        &self,
        x_t: &Tensor,
        t: usize,
        branches: &[Conditioning],
        hooks: &mut SiteHooks<'_>,
        keep: bool,
    ) -> Result<(Vec<Tensor>, Option<Vec<ForwardCache>>), DenoiseError> {
        let p = &self.params;
        let (h, w) = x_t.spatial();
        let sites = self.sites(h, w);
        hooks.check_arity(sites.len())?;
        self.check_canvas(x_t)?;
        if t > self.schedule.horizon() {
            return Err(crate::diffusion::DiffusionError::TimestepOutOfRange {
                t,
                max: self.schedule.horizon(),
            }
            .into());
        }
        for b in branches {
            check_shape((1, h, w), &b.control.pose_map)?;
        }
        let phi = time_features(t, &self.schedule);
        let tokens: Vec<Vec<&[f64]>> = branches
            .iter()
            .map(|b| b.tokens.iter().map(|e| e.vector.as_slice()).collect())
            .collect();
        let n = branches.len();
        let mut caches: Vec<ForwardCache> = (0..n)
            .map(|_| ForwardCache {
                x_t: x_t.clone(),
                features: phi,
                enc_in: Vec::new(),
                enc_pre: Vec::new(),
                enc_attn: Vec::new(),
                enc_out: Vec::new(),
                dec_in: Vec::new(),
                dec_pre: Vec::new(),
                dec_attn: Vec::new(),
                pose: Vec::new(),
                head_in: Tensor::zeros(0, 0, 0),
            })
            .collect();

        let conv_block = |block: &ConvBlock, input: &Tensor| -> Tensor {
            let mut pre = conv2d(input, &block.w, &block.b);
            add_channel_bias(&mut pre, &block.wt, &phi);
            pre
        };

        // Encoder.
        let mut skips: Vec<Vec<Tensor>> = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            let results: Vec<(Tensor, Tensor, Tensor, AttnCache)> = (0..n)
                .into_par_iter()
                .map(|b| {
                    let input = if l == 0 {
                        x_t.clone()
                    } else {
                        skips[l - 1][b].avg_pool2()
                    };
                    let pre = conv_block(&p.enc_conv[l], &input);
                    let act = pre.map(silu);
                    let (out, cache) = p.enc_attn[l].op().forward(&act, &tokens[b]);
                    (out, input, pre, cache)
                })
                .collect();
            let mut outs = Vec::with_capacity(n);
            for (b, (out, input, pre, cache)) in results.into_iter().enumerate() {
                if keep {
                    caches[b].enc_in.push(input);
                    caches[b].enc_pre.push(pre);
                    caches[b].enc_attn.push(cache);
                }
                outs.push(out);
            }
            hooks.apply(l, &sites[l], &mut outs)?;
            if keep {
                for (c, o) in caches.iter_mut().zip(&outs) {
                    c.enc_out.push(o.clone());
                }
            }
            skips.push(outs);
        }

        // Pose maps pooled to each level.
        let pose_levels: Vec<Vec<Tensor>> = branches
            .iter()
            .map(|b| {
                let mut v = vec![b.control.pose_map.clone()];
                for l in 1..LEVELS {
                    let next = v[l - 1].avg_pool2();
                    v.push(next);
                }
                v
            })
            .collect();

        // Decoder, deepest first.
        let mut below: Vec<Tensor> = Vec::new();
        for l in (0..LEVELS).rev() {
            let site_idx = LEVELS + (LEVELS - 1 - l);
            let pre_results: Vec<(Tensor, Tensor, Tensor)> = (0..n)
                .into_par_iter()
                .map(|b| {
                    let input = if l == LEVELS - 1 {
                        skips[l][b].clone()
                    } else {
                        below[b].upsample2().concat_channels(&skips[l][b])
                    };
                    let pre = conv_block(&p.dec_conv[l], &input);
                    let act = pre.map(silu);
                    (input, pre, act)
                })
                .collect();
            let mut controls: Vec<Tensor> = pose_levels
                .iter()
                .map(|pl| control_embedding(&p.dec_ctrl[l], &pl[l]))
                .collect();
            hooks.apply_control(&sites[site_idx], &mut controls)?;
            let results: Vec<(Tensor, AttnCache)> = pre_results
                .par_iter()
                .zip(controls.par_iter())
                .enumerate()
                .map(|(b, ((_, _, act), ctrl))| {
                    let mut d = act.clone();
                    d.axpy(1.0, ctrl);
                    p.dec_attn[l].op().forward(&d, &tokens[b])
                })
                .collect();
            let mut outs = Vec::with_capacity(n);
            for (b, ((out, cache), (input, pre, _))) in
                results.into_iter().zip(pre_results).enumerate()
            {
                if keep {
                    caches[b].dec_in.push(input);
                    caches[b].dec_pre.push(pre);
                    caches[b].dec_attn.push(cache);
                    caches[b].pose.push(pose_levels[b][l].clone());
                }
                outs.push(out);
            }
            hooks.apply(site_idx, &sites[site_idx], &mut outs)?;
            below = outs;
        }

        let gain: Vec<f64> = (0..3)
            .map(|c| {
                p.head.gain_b.data[c]
                    + (0..TIME_FEATURES)
                        .map(|j| p.head.gain_w.data[c * TIME_FEATURES + j] * phi[j])
                        .sum::<f64>()
            })
            .collect();
        let eps: Vec<Tensor> = below
            .par_iter()
            .map(|g| {
                let mut e = conv2d(g, &p.head.w, &p.head.b);
                for (c, &gc) in gain.iter().enumerate() {
                    for (o, x) in e.plane_mut(c).iter_mut().zip(x_t.plane(c)) {
                        *o += gc * x;
                    }
                }
                e
            })
            .collect();
        if keep {
            for (c, g) in caches.iter_mut().zip(below) {
                c.head_in = g;
            }
        }
        Ok((eps, keep.then_some(caches)))
    }

    /// Parameter gradient of `Σ grad_eps ⊙ ε` for one branch evaluated without hooks.
    ///
    /// Decoder-level lists in `cache` are stored deepest first.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        tokens: &[&[f64]],
        grad_eps: &Tensor,
        grads: &mut TinyParams,
    ) {
        let p = &self.params;
        let phi = &cache.features;
        let x_t = &cache.x_t;

        for c in 0..3 {
            let s: f64 = grad_eps
                .plane(c)
                .iter()
                .zip(x_t.plane(c))
                .map(|(g, x)| g * x)
                .sum();
            grads.head.gain_b.data[c] += s;
            for j in 0..TIME_FEATURES {
                grads.head.gain_w.data[c * TIME_FEATURES + j] += s * phi[j];
            }
        }
        let mut grad_up = conv2d_backward(
            &cache.head_in,
            &p.head.w,
            grad_eps,
            &mut grads.head.w,
            &mut grads.head.b,
        );

        let mut grad_skip: Vec<Option<Tensor>> = vec![None; LEVELS];
        for l in 0..LEVELS {
            let k = LEVELS - 1 - l;
            let g_d = {
                let [gwq, gwk, gwv, gbv] = attn_grads(&mut grads.dec_attn[l]);
                p.dec_attn[l].op().backward(
                    &cache.dec_attn[k],
                    tokens,
                    &grad_up,
                    [gwq, gwk, gwv, gbv],
                )
            };
            let pose = cache.pose[k].data();
            for c in 0..g_d.channels() {
                let gp = g_d.plane(c);
                grads.dec_ctrl[l].b.data[c] += gp.iter().sum::<f64>();
                grads.dec_ctrl[l].w.data[c] +=
                    gp.iter().zip(pose.iter()).map(|(g, m)| g * m).sum::<f64>();
            }
            let pre = &cache.dec_pre[k];
            let mut g_pre = g_d;
            for (g, x) in g_pre.data_mut().iter_mut().zip(pre.data()) {
                *g *= silu_grad(*x);
            }
            add_channel_bias_backward(&g_pre, &mut grads.dec_conv[l].wt, phi);
            let blk = &mut grads.dec_conv[l];
            let g_in = conv2d_backward(
                &cache.dec_in[k],
                &p.dec_conv[l].w,
                &g_pre,
                &mut blk.w,
                &mut blk.b,
            );
            if l == LEVELS - 1 {
                grad_skip[l] = Some(g_in);
            } else {
                let deeper = p.config.channels[l + 1];
                let (g_upsampled, g_skip) = g_in.split_channels(deeper);
                grad_skip[l] = Some(g_skip);
                grad_up = g_upsampled.upsample2_backward();
            }
        }

        let mut carry: Option<Tensor> = None;
        for l in (0..LEVELS).rev() {
            let mut g_out = grad_skip[l].take().expect("filled by decoder");
            if let Some(c) = carry.take() {
                g_out.axpy(1.0, &c);
            }
            let g_act = {
                let [gwq, gwk, gwv, gbv] = attn_grads(&mut grads.enc_attn[l]);
                p.enc_attn[l].op().backward(
                    &cache.enc_attn[l],
                    tokens,
                    &g_out,
                    [gwq, gwk, gwv, gbv],
                )
            };
            let mut g_pre = g_act;
            for (g, x) in g_pre.data_mut().iter_mut().zip(cache.enc_pre[l].data()) {
                *g *= silu_grad(*x);
            }
            add_channel_bias_backward(&g_pre, &mut grads.enc_conv[l].wt, phi);
            let blk = &mut grads.enc_conv[l];
            let g_in = conv2d_backward(
                &cache.enc_in[l],
                &p.enc_conv[l].w,
                &g_pre,
                &mut blk.w,
                &mut blk.b,
            );
            if l > 0 {
                carry = Some(g_in.avg_pool2_backward());
            }
        }
    }
}

fn attn_grads(b: &mut AttnBlock) -> [&mut Param; 4] {
    [&mut b.wq, &mut b.wk, &mut b.wv, &mut b.bv]
}

/// `w_c · pose + b_c` for every channel `c`.
fn control_embedding(block: &ControlBlock, pose: &Tensor) -> Tensor {
    let c = block.w.len();
    let (h, w) = pose.spatial();
    let mut out = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let (wv, bv) = (block.w.data[ch], block.b.data[ch]);
        for (o, m) in out.plane_mut(ch).iter_mut().zip(pose.data()) {
            *o = wv * m + bv;
        }
    }
    out
}

impl Denoiser for TinyDenoiser {
    fn sites(&self, height: usize, width: usize) -> Vec<SiteInfo> {
        let c = self.params.config.channels;
        let site = |name: String, stage, l: usize| SiteInfo {
            name,
            stage,
            channels: c[l],
            height: height >> l,
            width: width >> l,
        };
        let mut out: Vec<SiteInfo> = (0..LEVELS)
            .map(|l| site(format!("e{l}"), SiteStage::Encoder, l))
            .collect();
        out.extend(
            (0..LEVELS)
                .rev()
                .map(|l| site(format!("d{l}"), SiteStage::Decoder, l)),
        );
        out
    }

    fn epsilon(
        &self,
        x_t: &Tensor,
        t: usize,
        branches: &[Conditioning],
        hooks: &mut SiteHooks<'_>,
    ) -> Result<Vec<Tensor>, DenoiseError> {
        Ok(self.forward(x_t, t, branches, hooks, false)?.0)
    }
}
