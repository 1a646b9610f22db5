//! Forward and backward passes for the tiny denoiser's building blocks.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// A named, row-major parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        Self {
            shape: shape.to_vec(),
            data: (0..shape.iter().product())
                .map(|_| normal.sample(rng))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Square convolution with zero padding `k / 2`, stride 1.
///
/// `w` has shape `[co, ci, k, k]`; `b` has shape `[co]`.
pub fn conv2d(input: &Tensor, w: &Param, b: &Param) -> Tensor {
    let (co, ci, k) = (w.shape[0], w.shape[1], w.shape[2]);
    assert_eq!(input.channels(), ci, "conv input channels");
    let (h, wd) = input.spatial();
    let pad = (k / 2) as isize;
    let mut out = Tensor::zeros(co, h, wd);
    for o in 0..co {
        let dst = out.plane_mut(o);
        dst.fill(b.data[o]);
        for i in 0..ci {
            let src = input.plane(i);
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(wd, dx);
                    let wv = w.data[((o * ci + i) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let srow = &src[sy * wd..(sy + 1) * wd];
                        let drow = &mut dst[y * wd..(y + 1) * wd];
                        let sx0 = (x0 as isize + dx) as usize;
                        for (d, s) in drow[x0..x1].iter_mut().zip(&srow[sx0..sx0 + (x1 - x0)]) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Rows/cols `y` for which `y + d` stays inside `0..n`.
#[inline]
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).min(n as isize).max(0) as usize;
    (lo.min(hi), hi)
}

/// Accumulates parameter gradients and returns the input gradient of [`conv2d`].
pub fn conv2d_backward(
    input: &Tensor,
    w: &Param,
    grad_out: &Tensor,
    gw: &mut Param,
    gb: &mut Param,
) -> Tensor {
    let (co, ci, k) = (w.shape[0], w.shape[1], w.shape[2]);
    let (h, wd) = input.spatial();
    let pad = (k / 2) as isize;
    let mut grad_in = Tensor::zeros(ci, h, wd);
    for o in 0..co {
        let go = grad_out.plane(o);
        gb.data[o] += go.iter().sum::<f64>();
        for i in 0..ci {
            let src = input.plane(i);
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(wd, dx);
                    let widx = ((o * ci + i) * k + ky) * k + kx;
                    let wv = w.data[widx];
                    let mut acc = 0.0;
                    let gi = grad_in.plane_mut(i);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        let n = x1 - x0;
                        let grow = &go[y * wd + x0..y * wd + x0 + n];
                        let srow = &src[sy * wd + sx0..sy * wd + sx0 + n];
                        acc += grow.iter().zip(srow).map(|(g, s)| g * s).sum::<f64>();
                        if wv != 0.0 {
                            let irow = &mut gi[sy * wd + sx0..sy * wd + sx0 + n];
                            for (d, g) in irow.iter_mut().zip(grow) {
                                *d += wv * g;
                            }
                        }
                    }
                    gw.data[widx] += acc;
                }
            }
        }
    }
    grad_in
}

/// Adds `W·φ` (shape `[c, d]` times `[d]`) to every pixel of channel `c`.
pub fn add_channel_bias(x: &mut Tensor, w: &Param, features: &[f64]) {
    let d = w.shape[1];
    for c in 0..x.channels() {
        let bias: f64 = (0..d).map(|j| w.data[c * d + j] * features[j]).sum();
        for v in x.plane_mut(c) {
            *v += bias;
        }
    }
}

pub fn add_channel_bias_backward(grad: &Tensor, gw: &mut Param, features: &[f64]) {
    let d = gw.shape[1];
    for c in 0..grad.channels() {
        let s: f64 = grad.plane(c).iter().sum();
        for j in 0..d {
            gw.data[c * d + j] += s * features[j];
        }
    }
}

/// Cached state of a cross-attention forward pass.
#[derive(Debug, Clone)]
pub struct AttnCache {
    pub input: Tensor,
    /// Queries, `[d, P]`.
    pub q: Vec<f64>,
    /// Keys, `[K, d]`.
    pub k: Vec<f64>,
    /// Values, `[K, C]`.
    pub v: Vec<f64>,
    /// Attention weights, `[K, P]`.
    pub attn: Vec<f64>,
}

/// Residual cross-attention of pixel features over text tokens.
///
/// `out(p) = h(p) + Σ_k softmax_k(q(p)·k_k / √d) v_k`, with `q = Wq·h(p)`,
/// `k_k = Wk·e_k` and `v_k = Wv·e_k + bv`. With no tokens the block is the identity.
pub struct CrossAttention<'a> {
    pub wq: &'a Param,
    pub wk: &'a Param,
    pub wv: &'a Param,
    pub bv: &'a Param,
}

impl CrossAttention<'_> {
    pub fn forward(&self, h: &Tensor, tokens: &[&[f64]]) -> (Tensor, AttnCache) {
        let (c, p) = (h.channels(), h.plane_len());
        let d = self.wq.shape[0];
        let e = self.wk.shape[1];
        let n_tok = tokens.len();
        let mut out = h.clone();
        let mut k = vec![0.0; n_tok * d];
        let mut v = vec![0.0; n_tok * c];
        for (t, tok) in tokens.iter().enumerate() {
            for a in 0..d {
                k[t * d + a] = (0..e).map(|j| self.wk.data[a * e + j] * tok[j]).sum();
            }
            for ch in 0..c {
                v[t * c + ch] = self.bv.data[ch]
                    + (0..e)
                        .map(|j| self.wv.data[ch * e + j] * tok[j])
                        .sum::<f64>();
            }
        }
        let mut q = vec![0.0; d * p];
        for a in 0..d {
            let qrow = &mut q[a * p..(a + 1) * p];
            for ch in 0..c {
                let wv = self.wq.data[a * c + ch];
                for (qv, hv) in qrow.iter_mut().zip(h.plane(ch)) {
                    *qv += wv * hv;
                }
            }
        }
        let mut attn = vec![0.0; n_tok * p];
        if n_tok > 0 {
            let scale = 1.0 / (d as f64).sqrt();
            let mut scores = vec![0.0; n_tok];
            for px in 0..p {
                for (t, s) in scores.iter_mut().enumerate() {
                    *s = scale * (0..d).map(|a| q[a * p + px] * k[t * d + a]).sum::<f64>();
                }
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                for (t, s) in scores.iter().enumerate() {
                    attn[t * p + px] = s / total;
                }
            }
            for ch in 0..c {
                let dst = out.plane_mut(ch);
                for t in 0..n_tok {
                    let val = v[t * c + ch];
                    for (o, a) in dst.iter_mut().zip(&attn[t * p..(t + 1) * p]) {
                        *o += a * val;
                    }
                }
            }
        }
        (
            out,
            AttnCache {
                input: h.clone(),
                q,
                k,
                v,
                attn,
            },
        )
    }

    /// Returns the input gradient and accumulates parameter gradients into `grads`
    /// (ordered `wq, wk, wv, bv`).
    pub fn backward(
        &self,
        cache: &AttnCache,
        tokens: &[&[f64]],
        grad_out: &Tensor,
        grads: [&mut Param; 4],
    ) -> Tensor {
        let [gwq, gwk, gwv, gbv] = grads;
        let h = &cache.input;
        let (c, p) = (h.channels(), h.plane_len());
        let d = self.wq.shape[0];
        let e = self.wk.shape[1];
        let n_tok = tokens.len();
        let mut grad_in = grad_out.clone();
        if n_tok == 0 {
            return grad_in;
        }
        let scale = 1.0 / (d as f64).sqrt();
        // dV_k = Σ_p a_k(p)·g(p);  da_k(p) = g(p)·v_k
        let mut dv = vec![0.0; n_tok * c];
        let mut da = vec![0.0; n_tok * p];
        for ch in 0..c {
            let g = grad_out.plane(ch);
            for t in 0..n_tok {
                let a = &cache.attn[t * p..(t + 1) * p];
                dv[t * c + ch] = a.iter().zip(g).map(|(x, y)| x * y).sum();
                let val = cache.v[t * c + ch];
                for (dst, gv) in da[t * p..(t + 1) * p].iter_mut().zip(g) {
                    *dst += val * gv;
                }
            }
        }
        // Softmax backward: ds = a ⊙ (da - Σ a·da)
        let mut ds = vec![0.0; n_tok * p];
        for px in 0..p {
            let dot: f64 = (0..n_tok)
                .map(|t| cache.attn[t * p + px] * da[t * p + px])
                .sum();
            for t in 0..n_tok {
                ds[t * p + px] = cache.attn[t * p + px] * (da[t * p + px] - dot) * scale;
            }
        }
        let mut dq = vec![0.0; d * p];
        let mut dk = vec![0.0; n_tok * d];
        for a in 0..d {
            let qrow = &cache.q[a * p..(a + 1) * p];
            let dqrow = &mut dq[a * p..(a + 1) * p];
            for t in 0..n_tok {
                let kv = cache.k[t * d + a];
                let srow = &ds[t * p..(t + 1) * p];
                dk[t * d + a] = srow.iter().zip(qrow).map(|(s, q)| s * q).sum();
                for (dst, s) in dqrow.iter_mut().zip(srow) {
                    *dst += s * kv;
                }
            }
        }
        for a in 0..d {
            let dqrow = &dq[a * p..(a + 1) * p];
            for ch in 0..c {
                gwq.data[a * c + ch] += dqrow
                    .iter()
                    .zip(h.plane(ch))
                    .map(|(x, y)| x * y)
                    .sum::<f64>();
                let wv = self.wq.data[a * c + ch];
                for (dst, g) in grad_in.plane_mut(ch).iter_mut().zip(dqrow) {
                    *dst += wv * g;
                }
            }
        }
        for (t, tok) in tokens.iter().enumerate() {
            for a in 0..d {
                for j in 0..e {
                    gwk.data[a * e + j] += dk[t * d + a] * tok[j];
                }
            }
            for ch in 0..c {
                gbv.data[ch] += dv[t * c + ch];
                for j in 0..e {
                    gwv.data[ch * e + j] += dv[t * c + ch] * tok[j];
                }
            }
        }
        grad_in
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(2, 5, 4, &mut rng);
        let w = Param::randn(&[3, 2, 3, 3], 0.5, &mut rng);
        let b = Param::randn(&[3], 0.5, &mut rng);
        let probe = Tensor::randn(3, 5, 4, &mut rng);
        let mut gw = w.zeros_like();
        let mut gb = b.zeros_like();
        let gx = conv2d_backward(&x, &w, &probe, &mut gw, &mut gb);
        let h = 1e-6;
        for idx in [0, 7, 20, 53] {
            let mut wp = w.clone();
            wp.data[idx] += h;
            let mut wm = w.clone();
            wm.data[idx] -= h;
            let fd =
                (dot(&conv2d(&x, &wp, &b), &probe) - dot(&conv2d(&x, &wm, &b), &probe)) / (2.0 * h);
            assert!((fd - gw.data[idx]).abs() < 1e-6, "w[{idx}]");
        }
        for idx in [0, 13, 39] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd =
                (dot(&conv2d(&xp, &w, &b), &probe) - dot(&conv2d(&xm, &w, &b), &probe)) / (2.0 * h);
            assert!((fd - gx.data()[idx]).abs() < 1e-6, "x[{idx}]");
        }
    }

    #[test]
    fn attention_without_tokens_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = Tensor::randn(4, 3, 3, &mut rng);
        let wq = Param::randn(&[2, 4], 1.0, &mut rng);
        let wk = Param::randn(&[2, 5], 1.0, &mut rng);
        let wv = Param::randn(&[4, 5], 1.0, &mut rng);
        let bv = Param::randn(&[4], 1.0, &mut rng);
        let attn = CrossAttention {
            wq: &wq,
            wk: &wk,
            wv: &wv,
            bv: &bv,
        };
        assert_eq!(attn.forward(&h, &[]).0, h);
    }
}
