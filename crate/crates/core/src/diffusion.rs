//! Noise schedule, forward noising and the DDIM reverse update.
//!
//! `alpha_bar[t]` is the cumulative signal coefficient ᾱ_t with ᾱ_0 = 1.
//! The reverse step follows
//!
//! ```text
//! x0      = (x_t - sqrt(1 - ᾱ_t)·ε) / sqrt(ᾱ_t)
//! x_prev  = sqrt(ᾱ_prev)·x0 + sqrt(1 - ᾱ_prev - σ²)·ε + σ·z
//! σ       = η · sqrt((1 - ᾱ_prev)/(1 - ᾱ_t)) · sqrt(1 - ᾱ_t/ᾱ_prev)
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("invalid schedule range: {0}")]
    InvalidRange(String),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("timestep {t} outside schedule 0..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("t_prev ({t_prev}) must be smaller than t ({t})")]
    NonDecreasingStep { t: usize, t_prev: usize },
    #[error("negative radicand: sigma^2 = {sigma_sq} exceeds 1 - alpha_bar_prev = {limit}")]
    NegativeRadicand { sigma_sq: f64, limit: f64 },
    #[error("step noise must be supplied exactly when eta > 0 (eta = {eta})")]
    NoiseMismatch { eta: f64 },
    #[error("alpha_bar must be positive to predict x0")]
    ZeroSignal,
    #[error("sampler config invalid: {0}")]
    InvalidConfig(String),
}

/// Cumulative signal coefficients for a linear-β training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds ᾱ_t = Π_{s≤t}(1 - β_s) with β linearly spaced over `1..=T`.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self, DiffusionError> {
        if t_max < 1 {
            return Err(DiffusionError::InvalidRange("T must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(DiffusionError::InvalidRange(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let mut alpha_bar = Vec::with_capacity(t_max + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for s in 0..t_max {
            let beta = if t_max == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * s as f64 / (t_max - 1) as f64
            };
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Ok(Self { alpha_bar })
    }

    /// Wraps an explicit ᾱ table; it must start at 1 and decrease strictly to a positive value.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self, DiffusionError> {
        if alpha_bar.len() < 2 || alpha_bar[0] != 1.0 {
            return Err(DiffusionError::InvalidRange(
                "table must start at alpha_bar_0 = 1".into(),
            ));
        }
        if alpha_bar.windows(2).any(|w| !(w[1] < w[0])) || !(alpha_bar[alpha_bar.len() - 1] > 0.0) {
            return Err(DiffusionError::InvalidRange(
                "alpha_bar must decrease strictly and stay positive".into(),
            ));
        }
        Ok(Self { alpha_bar })
    }

    /// Training horizon `T`.
    pub fn horizon(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn table(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<(), DiffusionError> {
        if t > self.horizon() {
            return Err(DiffusionError::TimestepOutOfRange {
                t,
                max: self.horizon(),
            });
        }
        Ok(())
    }

    /// Evenly spaced, endpoint-inclusive DDIM subsequence `T = t_K > … > t_0 = 0`.
    ///
    /// Returns `num_steps + 1` timesteps; step `k` moves from `ts[k]` to `ts[k + 1]`.
    pub fn ddim_timesteps(&self, num_steps: usize) -> Result<Vec<usize>, DiffusionError> {
        let t_max = self.horizon();
        if num_steps == 0 || num_steps > t_max {
            return Err(DiffusionError::InvalidConfig(format!(
                "num_steps must lie in 1..={t_max}, got {num_steps}"
            )));
        }
        Ok((0..=num_steps)
            .rev()
            .map(|k| ((t_max * k) as f64 / num_steps as f64).round() as usize)
            .collect())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }
}

/// Sampling hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub num_steps: usize,
    /// Scales σ_t relative to the DDPM posterior standard deviation.
    pub eta: f64,
    pub seed: u64,
    /// Classifier-free guidance weight; 1 disables guidance.
    pub guidance_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: 20,
            eta: 0.0,
            seed: 0,
            guidance_scale: 1.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<(), DiffusionError> {
        if self.num_steps == 0 || self.num_steps > sched.horizon() {
            return Err(DiffusionError::InvalidConfig(format!(
                "num_steps must lie in 1..={}",
                sched.horizon()
            )));
        }
        if !(self.eta >= 0.0) {
            return Err(DiffusionError::InvalidConfig(format!(
                "eta must be >= 0, got {}",
                self.eta
            )));
        }
        Ok(())
    }
}

/// Scalar form of the forward process: `sqrt(ᾱ)·x0 + sqrt(1 - ᾱ)·ε`.
pub fn noised_value(alpha_bar: f64, x0: f64, eps: f64) -> f64 {
    alpha_bar.sqrt() * x0 + (1.0 - alpha_bar).sqrt() * eps
}

/// Scalar form of the clean-image prediction.
pub fn x0_value(alpha_bar: f64, x_t: f64, eps: f64) -> f64 {
    (x_t - (1.0 - alpha_bar).sqrt() * eps) / alpha_bar.sqrt()
}

/// σ_t of the DDIM update.
pub fn ddim_sigma(alpha_bar_t: f64, alpha_bar_prev: f64, eta: f64) -> f64 {
    if eta == 0.0 {
        return 0.0;
    }
    eta * ((1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t)).sqrt()
        * (1.0 - alpha_bar_t / alpha_bar_prev).sqrt()
}

/// Coefficients of `x_prev = a·x0 + b·ε + σ·z` for one DDIM step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdimCoefficients {
    pub x0: f64,
    pub eps: f64,
    pub sigma: f64,
}

pub fn ddim_coefficients(
    alpha_bar_t: f64,
    alpha_bar_prev: f64,
    eta: f64,
) -> Result<DdimCoefficients, DiffusionError> {
    let sigma = ddim_sigma(alpha_bar_t, alpha_bar_prev, eta);
    let limit = 1.0 - alpha_bar_prev;
    let radicand = limit - sigma * sigma;
    if radicand < 0.0 {
        // Tolerate rounding when eta = 1 makes the radicand vanish.
        if radicand > -1e-12 {
            return Ok(DdimCoefficients {
                x0: alpha_bar_prev.sqrt(),
                eps: 0.0,
                sigma,
            });
        }
        return Err(DiffusionError::NegativeRadicand {
            sigma_sq: sigma * sigma,
            limit,
        });
    }
    Ok(DdimCoefficients {
        x0: alpha_bar_prev.sqrt(),
        eps: radicand.sqrt(),
        sigma,
    })
}

fn check_shapes(a: &Tensor, b: &Tensor) -> Result<(), DiffusionError> {
    if !a.same_shape(b) {
        return Err(DiffusionError::ShapeMismatch(a.shape(), b.shape()));
    }
    Ok(())
}

/// Forward noising of `x0` to timestep `t` with noise `eps`.
pub fn add_noise(
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor, DiffusionError> {
    check_shapes(x0, eps)?;
    sched.check_t(t)?;
    let a = sched.alpha_bar(t);
    Ok(x0.lincomb(a.sqrt(), eps, (1.0 - a).sqrt()))
}

/// Clean-image estimate implied by a noise prediction.
pub fn predict_x0(
    x_t: &Tensor,
    eps: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor, DiffusionError> {
    check_shapes(x_t, eps)?;
    sched.check_t(t)?;
    let a = sched.alpha_bar(t);
    if !(a > 0.0) {
        return Err(DiffusionError::ZeroSignal);
    }
    let inv = 1.0 / a.sqrt();
    Ok(x_t.lincomb(inv, eps, -(1.0 - a).sqrt() * inv))
}

/// One DDIM update from `t` to `t_prev`.
///
/// `noise` must be given exactly when `cfg.eta > 0`.
pub fn ddim_step(
    x_t: &Tensor,
    eps: &Tensor,
    t: usize,
    t_prev: usize,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    noise: Option<&Tensor>,
) -> Result<Tensor, DiffusionError> {
    if t_prev >= t {
        return Err(DiffusionError::NonDecreasingStep { t, t_prev });
    }
    sched.check_t(t)?;
    if (cfg.eta > 0.0) != noise.is_some() {
        return Err(DiffusionError::NoiseMismatch { eta: cfg.eta });
    }
    let coef = ddim_coefficients(sched.alpha_bar(t), sched.alpha_bar(t_prev), cfg.eta)?;
    let x0 = predict_x0(x_t, eps, t, sched)?;
    let mut out = x0.lincomb(coef.x0, eps, coef.eps);
    if let Some(z) = noise {
        check_shapes(x_t, z)?;
        out.axpy(coef.sigma, z);
    }
    Ok(out)
}
