//! The exact noise predictor for a point-mass data distribution.

use std::sync::Arc;

use super::{
    check_shape, render_figures, BranchSpec, Conditioning, DenoiseError, Denoiser, DenoiserFactory,
    Palette, SiteHooks, SiteInfo, SiteStage,
};
use crate::diffusion::NoiseSchedule;
use crate::tensor::Tensor;

/// `ε(x_t, t) = (x_t − √ᾱ_t·target) / √(1 − ᾱ_t)`, one target per branch.
///
/// Its only composition site is the output itself.
#[derive(Debug, Clone)]
pub struct DeltaDenoiser {
    targets: Vec<Tensor>,
    schedule: NoiseSchedule,
}

impl DeltaDenoiser {
    pub fn new(target: Tensor, schedule: NoiseSchedule) -> Self {
        Self::per_branch(vec![target], schedule)
    }

    /// Branch `i` is driven toward `targets[i]`. All targets share one shape.
    pub fn per_branch(targets: Vec<Tensor>, schedule: NoiseSchedule) -> Self {
        assert!(!targets.is_empty(), "at least one target");
        assert!(
            targets.iter().all(|t| t.same_shape(&targets[0])),
            "targets must share a shape"
        );
        Self { targets, schedule }
    }

    pub fn targets(&self) -> &[Tensor] {
        &self.targets
    }
}

impl Denoiser for DeltaDenoiser {
    fn sites(&self, height: usize, width: usize) -> Vec<SiteInfo> {
        vec![SiteInfo {
            name: "output".into(),
            stage: SiteStage::Output,
            channels: self.targets[0].channels(),
            height,
            width,
        }]
    }

    fn epsilon(
        &self,
        x_t: &Tensor,
        t: usize,
        branches: &[Conditioning],
        hooks: &mut SiteHooks<'_>,
    ) -> Result<Vec<Tensor>, DenoiseError> {
        hooks.check_arity(1)?;
        if branches.len() != self.targets.len() {
            return Err(DenoiseError::BranchCount {
                expected: self.targets.len(),
                got: branches.len(),
            });
        }
        check_shape(self.targets[0].shape(), x_t)?;
        if t > self.schedule.horizon() {
            return Err(crate::diffusion::DiffusionError::TimestepOutOfRange {
                t,
                max: self.schedule.horizon(),
            }
            .into());
        }
        let a = self.schedule.alpha_bar(t);
        let noise_sd = (1.0 - a).sqrt();
        if noise_sd == 0.0 {
            return Err(DenoiseError::TEdge { t });
        }
        let mut out: Vec<Tensor> = self
            .targets
            .iter()
            .map(|target| x_t.lincomb(1.0 / noise_sd, target, -a.sqrt() / noise_sd))
            .collect();
        let (h, w) = x_t.spatial();
        hooks.apply(0, &self.sites(h, w)[0], &mut out)?;
        Ok(out)
    }
}

/// Renders each branch's figures into its delta target.
#[derive(Debug, Clone, Default)]
pub struct DeltaFactory {
    pub palette: Palette,
    pub schedule: NoiseSchedule,
}

impl DenoiserFactory for DeltaFactory {
    fn build(
        &self,
        branches: &[BranchSpec],
        height: usize,
        width: usize,
    ) -> Result<Arc<dyn Denoiser>, DenoiseError> {
        let targets = branches
            .iter()
            .map(|b| render_figures(&b.figures, &self.palette, height, width))
            .collect::<Result<Vec<_>, _>>()?;
        if targets.is_empty() {
            return Err(DenoiseError::BranchCount {
                expected: 1,
                got: 0,
            });
        }
        Ok(Arc::new(DeltaDenoiser::per_branch(
            targets,
            self.schedule.clone(),
        )))
    }
}
