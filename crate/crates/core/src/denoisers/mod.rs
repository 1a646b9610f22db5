//! Noise predictors `ε(x_t, t, text, control)` with exposed composition sites.
//!
//! A [`Denoiser`] evaluates several conditioning branches in lockstep on one
//! shared `x_t`. At every composition site it hands the latents of all
//! branches to a [`SiteHooks`] callback, which may rewrite them in place
//! before the network continues. Identity hooks leave the pass unchanged.

pub mod checkpoint;
pub mod delta;
pub mod layers;
pub mod render;
pub mod text;
pub mod tiny;
pub mod train;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::DiffusionError;
use crate::pose_geometry::{GeometryError, Pose2D};
use crate::tensor::Tensor;

pub use delta::{DeltaDenoiser, DeltaFactory};
pub use render::{control_map, render_figures, render_instance, Palette, RENDER_LINE_WIDTH};
pub use text::{TextEmbedder, TextEmbedding};
pub use tiny::{TinyConfig, TinyDenoiser, TinyParams};

#[derive(Debug, Error)]
pub enum DenoiseError {
    #[error("timestep {t} has 1 - alpha_bar = 0; epsilon is undefined")]
    TEdge { t: usize },
    #[error("identity {0:?} has no palette entry")]
    UnknownToken(String),
    #[error("expected {expected} site hooks, got {got}")]
    HookArity { expected: usize, got: usize },
    #[error("expected {expected} branches, got {got}")]
    BranchCount { expected: usize, got: usize },
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("hook failed at site {site}: {message}")]
    Hook { site: String, message: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Spatial conditioning modality. Only `Pose` has an encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Modality {
    Pose,
    Canny,
    Mlsd,
    Hed,
    Sketch,
}

/// Spatially aligned control input: a `1×H×W` pose field.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlEmbedding {
    pub pose_map: Tensor,
    pub modality: Modality,
}

impl ControlEmbedding {
    pub fn pose(pose_map: Tensor) -> Self {
        Self {
            pose_map,
            modality: Modality::Pose,
        }
    }
}

/// Text tokens and control for one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub tokens: Vec<TextEmbedding>,
    pub control: ControlEmbedding,
}

impl Conditioning {
    /// The same control with no text tokens, used as the unconditional pass of guidance.
    pub fn unconditional(&self) -> Self {
        Self {
            tokens: Vec::new(),
            control: self.control.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SiteStage {
    Encoder,
    Decoder,
    Output,
}

/// A named location where the latents of all branches are exposed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteInfo {
    pub name: String,
    pub stage: SiteStage,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Callback receiving the latents of every branch at one site.
pub type SiteHook<'a> =
    Box<dyn FnMut(&SiteInfo, &mut [Tensor]) -> Result<(), DenoiseError> + Send + 'a>;

/// One optional callback per composition site, plus an optional hook on the
/// decoder-side control embeddings. `None` is the identity.
pub struct SiteHooks<'a> {
    latent: Vec<Option<SiteHook<'a>>>,
    control: Option<SiteHook<'a>>,
}

impl<'a> SiteHooks<'a> {
    pub fn identity(sites: usize) -> Self {
        Self {
            latent: (0..sites).map(|_| None).collect(),
            control: None,
        }
    }

    pub fn new(latent: Vec<Option<SiteHook<'a>>>) -> Self {
        Self {
            latent,
            control: None,
        }
    }

    /// The same callback at every one of `sites` sites.
    pub fn uniform<F>(sites: usize, f: F) -> Self
    where
        F: FnMut(&SiteInfo, &mut [Tensor]) -> Result<(), DenoiseError> + Send + Clone + 'a,
    {
        Self::new(
            (0..sites)
                .map(|_| Some(Box::new(f.clone()) as SiteHook<'a>))
                .collect(),
        )
    }

    pub fn with_control(mut self, hook: SiteHook<'a>) -> Self {
        self.control = Some(hook);
        self
    }

    pub fn len(&self) -> usize {
        self.latent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latent.is_empty()
    }

    pub fn check_arity(&self, expected: usize) -> Result<(), DenoiseError> {
        if self.latent.len() != expected {
            return Err(DenoiseError::HookArity {
                expected,
                got: self.latent.len(),
            });
        }
        Ok(())
    }

    pub fn apply(
        &mut self,
        index: usize,
        site: &SiteInfo,
        latents: &mut [Tensor],
    ) -> Result<(), DenoiseError> {
        match self.latent.get_mut(index) {
            Some(Some(hook)) => hook(site, latents),
            _ => Ok(()),
        }
    }

    pub fn apply_control(
        &mut self,
        site: &SiteInfo,
        embeddings: &mut [Tensor],
    ) -> Result<(), DenoiseError> {
        match self.control.as_mut() {
            Some(hook) => hook(site, embeddings),
            None => Ok(()),
        }
    }
}

/// The noise-prediction contract shared by every backbone.
pub trait Denoiser: Send + Sync {
    /// Ordered composition sites for an `height × width` canvas. Never empty.
    fn sites(&self, height: usize, width: usize) -> Vec<SiteInfo>;

    /// Noise prediction for every branch, all evaluated on the same `x_t`.
    fn epsilon(
        &self,
        x_t: &Tensor,
        t: usize,
        branches: &[Conditioning],
        hooks: &mut SiteHooks<'_>,
    ) -> Result<Vec<Tensor>, DenoiseError>;
}

/// One figure inside a branch: identity text and its pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Figure {
    pub identity: String,
    pub pose: Pose2D,
}

/// What a branch asks the backbone for: a prompt and the figures it controls.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchSpec {
    pub prompt: String,
    pub figures: Vec<Figure>,
}

/// Builds a denoiser suited to a given set of branches.
///
/// Trained backbones ignore the specs; the delta denoiser derives one
/// target image per branch from them.
pub trait DenoiserFactory: Send + Sync {
    fn build(
        &self,
        branches: &[BranchSpec],
        height: usize,
        width: usize,
    ) -> Result<Arc<dyn Denoiser>, DenoiseError>;
}

/// Hands out a shared, already built denoiser.
pub struct SharedFactory(pub Arc<dyn Denoiser>);

impl DenoiserFactory for SharedFactory {
    fn build(
        &self,
        _: &[BranchSpec],
        _: usize,
        _: usize,
    ) -> Result<Arc<dyn Denoiser>, DenoiseError> {
        Ok(self.0.clone())
    }
}

/// Text tokens from the prompt and the stroke map of all figures.
pub fn condition_branch(
    spec: &BranchSpec,
    embedder: &TextEmbedder,
    height: usize,
    width: usize,
) -> Result<Conditioning, DenoiseError> {
    let poses: Vec<&Pose2D> = spec.figures.iter().map(|f| &f.pose).collect();
    Ok(Conditioning {
        tokens: embedder.embed_prompt(&spec.prompt),
        control: ControlEmbedding::pose(control_map(&poses, height, width)?),
    })
}

pub(crate) fn check_shape(
    expected: (usize, usize, usize),
    got: &Tensor,
) -> Result<(), DenoiseError> {
    if got.shape() != expected {
        return Err(DenoiseError::ShapeMismatch {
            expected,
            got: got.shape(),
        });
    }
    Ok(())
}
