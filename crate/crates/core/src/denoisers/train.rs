//! Synthetic training data and the Adam training loop for [`TinyDenoiser`].

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tiny::{TinyDenoiser, TinyParams};
use super::{
    control_map, render_figures, Conditioning, ControlEmbedding, DenoiseError, Figure, Palette,
    SiteHooks, TextEmbedder, TextEmbedding, RENDER_LINE_WIDTH,
};
use crate::diffusion::{add_noise, NoiseSchedule};
use crate::pose_geometry::{Pose2D, RowLayout};
use crate::tensor::Tensor;

/// One rendered scene with its global prompt tokens and union pose map.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub image: Tensor,
    pub tokens: Vec<TextEmbedding>,
    pub control: Tensor,
}

impl TrainingSample {
    pub fn conditioning(&self) -> Conditioning {
        Conditioning {
            tokens: self.tokens.clone(),
            control: ControlEmbedding::pose(self.control.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub height: usize,
    pub width: usize,
    pub samples: usize,
    /// Share of scenes holding two figures with distinct identities.
    pub two_figure_fraction: f64,
    pub identities: Vec<String>,
    pub settings: Vec<String>,
    /// Range of figure scales, as used by [`RowLayout`].
    pub scale: (f64, f64),
    /// Range of figure distances for two-figure scenes.
    pub distance: (f64, f64),
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            samples: 512,
            two_figure_fraction: 0.5,
            identities: Palette::default().names().map(String::from).collect(),
            settings: ["on a beach", "in a park", "in a city"]
                .map(String::from)
                .to_vec(),
            scale: (0.6, 0.85),
            distance: (0.4, 1.0),
            seed: 0,
        }
    }
}

/// Renders a scene of figures placed left to right with the prompt
/// `"{id_1}, …, {id_n}, {setting}"`.
pub fn scene_sample(
    figures: &[Figure],
    setting: &str,
    palette: &Palette,
    embedder: &TextEmbedder,
    height: usize,
    width: usize,
) -> Result<TrainingSample, DenoiseError> {
    let mut clauses: Vec<&str> = figures.iter().map(|f| f.identity.as_str()).collect();
    clauses.push(setting);
    let poses: Vec<&Pose2D> = figures.iter().map(|f| &f.pose).collect();
    Ok(TrainingSample {
        image: render_figures(figures, palette, height, width)?,
        tokens: embedder.embed_prompt(&clauses.join(", ")),
        control: control_map(&poses, height, width)?,
    })
}

pub fn synth_training_set(
    cfg: &DatasetConfig,
    palette: &Palette,
    embedder: &TextEmbedder,
) -> Result<Vec<TrainingSample>, DenoiseError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.samples);
    while out.len() < cfg.samples {
        let two = cfg.identities.len() >= 2 && rng.gen_bool(cfg.two_figure_fraction);
        let count = if two { 2 } else { 1 };
        let scale = rng.gen_range(cfg.scale.0..=cfg.scale.1);
        let distance = rng.gen_range(cfg.distance.0..=cfg.distance.1);
        let mut layout = RowLayout::new(
            count,
            cfg.height,
            Some(cfg.width),
            scale,
            distance,
            RENDER_LINE_WIDTH,
        );
        // Random horizontal placement within the free margin.
        let xs: Vec<f64> = layout.figures.iter().map(|f| f.center_x).collect();
        let half = 0.2 * layout.figures[0].height + RENDER_LINE_WIDTH;
        let lo = half - xs[0];
        let hi = cfg.width as f64 - 1.0 - half - xs[count - 1];
        if lo > hi {
            continue;
        }
        let shift = rng.gen_range(lo..=hi);
        for f in layout.figures.iter_mut() {
            f.center_x += shift;
            f.arm_raise = rng.gen_range(-0.15..=0.15);
            f.leg_spread = rng.gen_range(0.0..=0.08);
        }
        let ids: Vec<&String> = cfg.identities.choose_multiple(&mut rng, count).collect();
        let figures: Vec<Figure> = layout
            .figures
            .iter()
            .zip(ids)
            .map(|(f, id)| Figure {
                identity: id.clone(),
                pose: f.pose(),
            })
            .collect();
        let setting = cfg
            .settings
            .choose(&mut rng)
            .map(String::as_str)
            .unwrap_or("");
        out.push(scene_sample(
            &figures, setting, palette, embedder, cfg.height, cfg.width,
        )?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            learning_rate: 2e-3,
            seed: 0,
        }
    }
}

/// Dataset, optimizer and initialization of a toy training run.
///
/// The default is the reference model: 2048 scenes, 12 epochs at 2e-3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub init_seed: u64,
}

impl Default for Recipe {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig {
                samples: 2048,
                ..Default::default()
            },
            train: TrainConfig {
                epochs: 12,
                ..Default::default()
            },
            init_seed: 0,
        }
    }
}

impl Recipe {
    /// Builds the dataset with the default palette and embedder, then trains.
    pub fn run(
        &self,
        schedule: &NoiseSchedule,
        progress: impl FnMut(usize, f64),
    ) -> Result<(TinyParams, TrainReport), DenoiseError> {
        let data =
            synth_training_set(&self.dataset, &Palette::default(), &TextEmbedder::default())?;
        let init = TinyParams::init(super::tiny::TinyConfig::default(), self.init_seed);
        train_tiny_denoiser(&data, schedule, init, &self.train, progress)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-sample loss `‖ε̂ − ε‖²` of every epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Per-sample loss `‖ε̂ − ε‖²` at timestep `t` and its parameter gradient.
pub fn loss_and_gradient(
    model: &TinyDenoiser,
    sample: &TrainingSample,
    t: usize,
    eps: &Tensor,
) -> Result<(f64, TinyParams), DenoiseError> {
    let x_t = add_noise(&sample.image, t, eps, model.schedule())?;
    let cond = [sample.conditioning()];
    let mut hooks = SiteHooks::identity(6);
    let (pred, caches) = model.forward(&x_t, t, &cond, &mut hooks, true)?;
    let diff = pred[0].lincomb(1.0, eps, -1.0);
    let loss = diff.sum_sq();
    let mut grads = model.params().zeros_like();
    let tokens: Vec<&[f64]> = sample.tokens.iter().map(|e| e.vector.as_slice()).collect();
    let cache = &caches.expect("requested")[0];
    model.backward(cache, &tokens, &diff.scale(2.0), &mut grads);
    Ok((loss, grads))
}

struct Adam {
    m: TinyParams,
    v: TinyParams,
    step: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &TinyParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut TinyParams, grads: &TinyParams, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        let grads = grads.named();
        for ((((_, p), (_, m)), (_, v)), (_, g)) in params
            .named_mut()
            .into_iter()
            .zip(self.m.named_mut())
            .zip(self.v.named_mut())
            .zip(grads)
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = Self::BETA1 * m.data[i] + (1.0 - Self::BETA1) * gi;
                v.data[i] = Self::BETA2 * v.data[i] + (1.0 - Self::BETA2) * gi * gi;
                p.data[i] -= lr * (m.data[i] / c1) / ((v.data[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Minimizes the noise-prediction error over uniformly drawn timesteps.
///
/// Batches are evaluated in parallel and reduced in a fixed order, so the
/// result depends only on the inputs and the seed.
pub fn train_tiny_denoiser(
    dataset: &[TrainingSample],
    schedule: &NoiseSchedule,
    init: TinyParams,
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<(TinyParams, TrainReport), DenoiseError> {
    if dataset.is_empty() || cfg.batch_size == 0 {
        return Err(DenoiseError::BranchCount {
            expected: 1,
            got: 0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = TinyDenoiser::new(init, schedule.clone());
    let mut adam = Adam::new(model.params());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut report = TrainReport {
        epoch_losses: Vec::with_capacity(cfg.epochs),
        steps: 0,
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let draws: Vec<(usize, usize, Tensor)> = batch
                .iter()
                .map(|&i| {
                    let (c, h, w) = dataset[i].image.shape();
                    let t = rng.gen_range(1..=schedule.horizon());
                    (i, t, Tensor::randn(c, h, w, &mut rng))
                })
                .collect();
            let results = draws
                .par_iter()
                .map(|(i, t, eps)| loss_and_gradient(&model, &dataset[*i], *t, eps))
                .collect::<Result<Vec<_>, _>>()?;
            let mut grads = model.params().zeros_like();
            let mut batch_loss = 0.0;
            for (loss, g) in &results {
                batch_loss += loss;
                for ((_, acc), (_, gi)) in grads.named_mut().into_iter().zip(g.named()) {
                    for (a, b) in acc.data.iter_mut().zip(&gi.data) {
                        *a += b / batch.len() as f64;
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(DenoiseError::Divergence {
                    step: report.steps,
                    loss: batch_loss,
                });
            }
            total += batch_loss;
            let mut params = model.params().clone();
            adam.update(&mut params, &grads, cfg.learning_rate);
            if !params.is_finite() {
                return Err(DenoiseError::Divergence {
                    step: report.steps,
                    loss: f64::NAN,
                });
            }
            model = TinyDenoiser::new(params, schedule.clone());
            report.steps += 1;
        }
        let mean = total / dataset.len() as f64;
        report.epoch_losses.push(mean);
        progress(epoch, mean);
    }
    let params = model.params().clone();
    Ok((params, report))
}
