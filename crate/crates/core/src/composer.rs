//! Multi-branch DDIM sampling with mask-weighted latent composition.
//!
//! Every instance gets its own conditioning branch, and all branches start
//! from the same noise image. In [`CompositionMode::FineControl`] the
//! latents of all branches are blended with the instance masks at every
//! composition site of the denoiser and the blend is copied back into each
//! branch. The branch noise predictions are blended the same way, so one
//! shared `x_{t-1}` exists after every step.
//!
//! The first `ceil(hard_fraction · steps)` steps use HARD masks and the
//! rest SOFT masks at temperature `tau`.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoisers::{
    condition_branch, BranchSpec, Conditioning, DenoiseError, Denoiser, DenoiserFactory, Figure,
    SiteHook, SiteHooks, SiteInfo, TextEmbedder, RENDER_LINE_WIDTH,
};
use crate::diffusion::{ddim_step, DiffusionError, NoiseSchedule, SamplerConfig};
use crate::pose_geometry::{
    dilated_occupancies, normalize_masks, resize_mask_pyramid, AttentionMaskSet, GeometryError,
    MaskLevel, MaskMode, Pose2D,
};
use crate::prompting::{PromptError, SceneSpec};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ComposeError {
    #[error("scene has no instances")]
    EmptyScene,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid harmony parameters: {0}")]
    InvalidHarmony(String),
    #[error(transparent)]
    Denoise(#[from] DenoiseError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarmonyParams {
    pub tau: f64,
    pub hard_fraction: f64,
}

impl Default for HarmonyParams {
    fn default() -> Self {
        Self {
            tau: 0.001,
            hard_fraction: 0.25,
        }
    }
}

impl HarmonyParams {
    pub fn validate(&self) -> Result<(), ComposeError> {
        if !(self.tau > 0.0) {
            return Err(ComposeError::InvalidHarmony(format!(
                "tau must be > 0, got {}",
                self.tau
            )));
        }
        if !(0.0..=1.0).contains(&self.hard_fraction) {
            return Err(ComposeError::InvalidHarmony(format!(
                "hard_fraction must lie in [0, 1], got {}",
                self.hard_fraction
            )));
        }
        Ok(())
    }

    /// Number of leading steps sampled with HARD masks.
    pub fn hard_steps(&self, num_steps: usize) -> usize {
        ((self.hard_fraction * num_steps as f64).ceil() as usize).min(num_steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum CompositionMode {
    /// Latent composition at every site, plus the final noise prediction.
    #[default]
    #[serde(rename = "FINECONTROL")]
    FineControl,
    /// Each branch takes its own DDIM step; the candidate images are blended.
    #[serde(rename = "X_COMPOSE")]
    XCompose,
    /// Control embeddings are blended and shared by all branches.
    #[serde(rename = "H_V2")]
    HV2,
    /// One branch with the joined prompt and the union pose map.
    #[serde(rename = "GLOBAL")]
    Global,
}

impl CompositionMode {
    pub const ALL: [CompositionMode; 4] =
        [Self::FineControl, Self::XCompose, Self::HV2, Self::Global];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::FineControl => "FINECONTROL",
            Self::XCompose => "X_COMPOSE",
            Self::HV2 => "H_V2",
            Self::Global => "GLOBAL",
        }
    }
}

impl std::fmt::Display for CompositionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CompositionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown mode {s:?}"))
    }
}

/// `Σ_i m_i ⊙ h_i`, with masks broadcast over channels.
pub fn compose_latents(latents: &[Tensor], masks: &MaskLevel) -> Result<Tensor, ComposeError> {
    let first = latents
        .first()
        .ok_or_else(|| ComposeError::ShapeMismatch("no latents".into()))?;
    if latents.len() != masks.len() {
        return Err(ComposeError::ShapeMismatch(format!(
            "{} latents, {} masks",
            latents.len(),
            masks.len()
        )));
    }
    if first.spatial() != masks.shape() {
        return Err(ComposeError::ShapeMismatch(format!(
            "latent {:?} vs mask {:?}",
            first.spatial(),
            masks.shape()
        )));
    }
    if let Some(bad) = latents.iter().find(|l| l.shape() != first.shape()) {
        return Err(ComposeError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            bad.shape(),
            first.shape()
        )));
    }
    let (c, h, w) = first.shape();
    let mut out = Tensor::zeros(c, h, w);
    for (lat, m) in latents.iter().zip(masks.masks()) {
        for ch in 0..c {
            for ((o, v), wgt) in out.plane_mut(ch).iter_mut().zip(lat.plane(ch)).zip(m) {
                *o += wgt * v;
            }
        }
    }
    Ok(out)
}

/// Composes all latents and writes the result back into every branch.
fn compose_in_place(latents: &mut [Tensor], masks: &MaskLevel) -> Result<(), ComposeError> {
    let composed = compose_latents(latents, masks)?;
    for l in latents.iter_mut() {
        l.clone_from(&composed);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub t: usize,
    pub t_prev: usize,
    pub mask_mode: MaskMode,
    /// Composition events during this step, across sites and passes.
    pub sites_composed: usize,
}

/// Audit record of one generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub mode: CompositionMode,
    pub instances: usize,
    pub branches: usize,
    pub num_steps: usize,
    pub hard_steps: usize,
    pub tau: f64,
    /// Whether the branch noise predictions (or, for X_COMPOSE, images) are blended every step.
    pub output_composed: bool,
    pub sites: Vec<String>,
    /// Total composition events per site name.
    pub site_counts: BTreeMap<String, usize>,
    pub steps: Vec<StepTrace>,
}

impl RunTrace {
    pub fn hard_step_count(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| s.mask_mode == MaskMode::Hard)
            .count()
    }
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub image: Tensor,
    pub trace: RunTrace,
    /// Base-resolution SOFT masks, one per instance.
    pub masks: AttentionMaskSet,
}

/// HARD and SOFT mask sets for the given poses, each with the pyramid for `sites`.
pub fn mask_sets(
    poses: &[&Pose2D],
    height: usize,
    width: usize,
    tau: f64,
    sites: &[SiteInfo],
) -> Result<(AttentionMaskSet, AttentionMaskSet), ComposeError> {
    let occs = dilated_occupancies(poses, height, width, RENDER_LINE_WIDTH)?;
    let mut shapes: Vec<(usize, usize)> = sites
        .iter()
        .map(|s| (s.height, s.width))
        .filter(|&s| s != (height, width))
        .collect();
    shapes.sort_unstable();
    shapes.dedup();
    let hard = resize_mask_pyramid(&normalize_masks(&occs, tau, MaskMode::Hard)?, &shapes)?;
    let soft = resize_mask_pyramid(&normalize_masks(&occs, tau, MaskMode::Soft)?, &shapes)?;
    Ok((hard, soft))
}

/// Branch layout of a scene under `mode`.
pub fn branch_specs(
    scene: &SceneSpec,
    mode: CompositionMode,
) -> Result<Vec<BranchSpec>, ComposeError> {
    if scene.instances.is_empty() {
        return Err(ComposeError::EmptyScene);
    }
    let figure = |i: usize| Figure {
        identity: scene.instances[i].identity.clone(),
        pose: scene.instances[i].pose.clone(),
    };
    Ok(match mode {
        CompositionMode::Global => vec![BranchSpec {
            prompt: scene.global_prompt(),
            figures: scene.left_to_right().into_iter().map(figure).collect(),
        }],
        _ => (0..scene.instances.len())
            .map(|i| {
                Ok(BranchSpec {
                    prompt: scene.instance_prompt(i)?,
                    figures: vec![figure(i)],
                })
            })
            .collect::<Result<_, ComposeError>>()?,
    })
}

/// Initial noise `x_T` and the per-step noise source for a seed.
pub fn initial_noise(seed: u64, height: usize, width: usize) -> (Tensor, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::randn(3, height, width, &mut rng);
    (x, rng)
}

struct Counters {
    names: Vec<String>,
    counts: Vec<AtomicUsize>,
}

impl Counters {
    fn new(sites: &[SiteInfo]) -> Self {
        Self {
            names: sites.iter().map(|s| s.name.clone()).collect(),
            counts: sites.iter().map(|_| AtomicUsize::new(0)).collect(),
        }
    }

    fn total(&self) -> usize {
        self.counts.iter().map(|c| c.load(Ordering::Relaxed)).sum()
    }
}

fn composing_hook<'a>(masks: &'a AttentionMaskSet, counter: &'a AtomicUsize) -> SiteHook<'a> {
    Box::new(move |site: &SiteInfo, latents: &mut [Tensor]| {
        let level = masks
            .level(site.height, site.width)
            .ok_or_else(|| DenoiseError::Hook {
                site: site.name.clone(),
                message: format!("no mask level at {}x{}", site.height, site.width),
            })?;
        compose_in_place(latents, level).map_err(|e| DenoiseError::Hook {
            site: site.name.clone(),
            message: e.to_string(),
        })?;
        counter.fetch_add(1, Ordering::Relaxed);
        Ok(())
    })
}

/// Per-run state shared by every denoiser evaluation.
struct BranchRunner<'a> {
    denoiser: &'a dyn Denoiser,
    mode: CompositionMode,
    conds: &'a [Conditioning],
    uncond: &'a [Conditioning],
    guidance: f64,
    sites: &'a [SiteInfo],
    counters: &'a Counters,
    control_counter: &'a AtomicUsize,
}

impl BranchRunner<'_> {
    /// One evaluation of all branches, with hooks chosen by the mode.
    fn pass(
        &self,
        x: &Tensor,
        t: usize,
        conds: &[Conditioning],
        masks: &AttentionMaskSet,
    ) -> Result<Vec<Tensor>, ComposeError> {
        let multi = conds.len() > 1;
        let mut hooks = match self.mode {
            CompositionMode::FineControl if multi => SiteHooks::new(
                self.counters
                    .counts
                    .iter()
                    .map(|c| Some(composing_hook(masks, c)))
                    .collect(),
            ),
            CompositionMode::HV2 if multi => SiteHooks::identity(self.sites.len())
                .with_control(composing_hook(masks, self.control_counter)),
            _ => SiteHooks::identity(self.sites.len()),
        };
        Ok(self.denoiser.epsilon(x, t, conds, &mut hooks)?)
    }

    /// Branch predictions with classifier-free guidance applied.
    fn epsilon(
        &self,
        x: &Tensor,
        t: usize,
        masks: &AttentionMaskSet,
    ) -> Result<Vec<Tensor>, ComposeError> {
        let eps = self.pass(x, t, self.conds, masks)?;
        if self.guidance == 1.0 {
            return Ok(eps);
        }
        let eps_u = self.pass(x, t, self.uncond, masks)?;
        Ok(eps
            .iter()
            .zip(&eps_u)
            .map(|(c, u)| u.lincomb(1.0 - self.guidance, c, self.guidance))
            .collect())
    }
}

/// Samples a scene with explicit sampler, harmony and mode settings.
pub fn generate(
    scene: &SceneSpec,
    factory: &dyn DenoiserFactory,
    cfg: &SamplerConfig,
    harmony: &HarmonyParams,
    mode: CompositionMode,
    schedule: &NoiseSchedule,
) -> Result<Generation, ComposeError> {
    let n = scene.instances.len();
    if n == 0 {
        return Err(ComposeError::EmptyScene);
    }
    harmony.validate()?;
    cfg.validate(schedule)?;
    let (h, w) = (scene.canvas.h, scene.canvas.w);
    for inst in &scene.instances {
        inst.pose.check_canvas(h, w)?;
    }
    let specs = branch_specs(scene, mode)?;
    let denoiser = factory.build(&specs, h, w)?;
    let sites = denoiser.sites(h, w);
    let embedder = TextEmbedder::default();
    let conds = specs
        .iter()
        .map(|s| condition_branch(s, &embedder, h, w))
        .collect::<Result<Vec<_>, _>>()?;
    let uncond: Vec<Conditioning> = conds.iter().map(Conditioning::unconditional).collect();
    let poses: Vec<&Pose2D> = scene.instances.iter().map(|i| &i.pose).collect();
    let (hard, soft) = mask_sets(&poses, h, w, harmony.tau, &sites)?;

    let timesteps = schedule.ddim_timesteps(cfg.num_steps)?;
    let hard_steps = harmony.hard_steps(cfg.num_steps);
    let (mut x, mut rng) = initial_noise(cfg.seed, h, w);
    let counters = Counters::new(&sites);
    let control_counter = AtomicUsize::new(0);
    let mut steps = Vec::with_capacity(cfg.num_steps);
    let mut output_events = 0usize;
    let composes_output = conds.len() > 1;
    let runner = BranchRunner {
        denoiser: denoiser.as_ref(),
        mode,
        conds: &conds,
        uncond: &uncond,
        guidance: cfg.guidance_scale,
        sites: &sites,
        counters: &counters,
        control_counter: &control_counter,
    };

    for (k, pair) in timesteps.windows(2).enumerate() {
        let (t, t_prev) = (pair[0], pair[1]);
        let masks = if k < hard_steps { &hard } else { &soft };
        let before = counters.total() + control_counter.load(Ordering::Relaxed);
        let eps = runner.epsilon(&x, t, masks)?;
        let noise = (cfg.eta > 0.0).then(|| Tensor::randn(3, h, w, &mut rng));
        x = if mode == CompositionMode::XCompose && composes_output {
            let candidates = eps
                .iter()
                .map(|e| ddim_step(&x, e, t, t_prev, cfg, schedule, noise.as_ref()))
                .collect::<Result<Vec<_>, _>>()?;
            compose_latents(&candidates, masks.base())?
        } else {
            let e = if composes_output {
                compose_latents(&eps, masks.base())?
            } else {
                eps.into_iter().next().expect("one branch")
            };
            ddim_step(&x, &e, t, t_prev, cfg, schedule, noise.as_ref())?
        };
        let mut composed = counters.total() + control_counter.load(Ordering::Relaxed) - before;
        if composes_output {
            composed += 1;
            output_events += 1;
        }
        steps.push(StepTrace {
            step: k,
            t,
            t_prev,
            mask_mode: masks.mode,
            sites_composed: composed,
        });
    }

    let mut site_counts: BTreeMap<String, usize> = counters
        .names
        .iter()
        .zip(&counters.counts)
        .map(|(n, c)| (n.clone(), c.load(Ordering::Relaxed)))
        .collect();
    let ctrl = control_counter.load(Ordering::Relaxed);
    if ctrl > 0 {
        site_counts.insert("control".into(), ctrl);
    }
    site_counts.insert(
        if mode == CompositionMode::XCompose {
            "x"
        } else {
            "epsilon"
        }
        .into(),
        output_events,
    );
    Ok(Generation {
        image: x,
        trace: RunTrace {
            mode,
            instances: n,
            branches: conds.len(),
            num_steps: cfg.num_steps,
            hard_steps,
            tau: harmony.tau,
            output_composed: composes_output,
            sites: sites.iter().map(|s| s.name.clone()).collect(),
            site_counts,
            steps,
        },
        masks: soft,
    })
}

/// Samples a scene with the settings it carries.
pub fn generate_scene(
    scene: &SceneSpec,
    factory: &dyn DenoiserFactory,
    schedule: &NoiseSchedule,
) -> Result<Generation, ComposeError> {
    generate(
        scene,
        factory,
        &scene.sampler_config(),
        &scene.harmony,
        scene.mode,
        schedule,
    )
}

/// Plain single-branch DDIM with no composition at all.
pub fn sample_single(
    denoiser: &dyn Denoiser,
    cond: &Conditioning,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
    height: usize,
    width: usize,
) -> Result<Tensor, ComposeError> {
    cfg.validate(schedule)?;
    let sites = denoiser.sites(height, width).len();
    let (mut x, mut rng) = initial_noise(cfg.seed, height, width);
    let uncond = [cond.unconditional()];
    for pair in schedule.ddim_timesteps(cfg.num_steps)?.windows(2) {
        let (t, t_prev) = (pair[0], pair[1]);
        let mut eps = denoiser.epsilon(
            &x,
            t,
            std::slice::from_ref(cond),
            &mut SiteHooks::identity(sites),
        )?;
        if cfg.guidance_scale != 1.0 {
            let u = denoiser.epsilon(&x, t, &uncond, &mut SiteHooks::identity(sites))?;
            eps[0] = u[0].lincomb(1.0 - cfg.guidance_scale, &eps[0], cfg.guidance_scale);
        }
        let noise = (cfg.eta > 0.0).then(|| Tensor::randn(3, height, width, &mut rng));
        x = ddim_step(&x, &eps[0], t, t_prev, cfg, schedule, noise.as_ref())?;
    }
    Ok(x)
}
