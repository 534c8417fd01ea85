//! Rendered-distribution denoisers `D_phi` / `D_q`.

use std::sync::Arc;

use rand::Rng;

use super::{AuxMode, DistillConfig};
use crate::denoiser::Denoiser;
use crate::error::Result;
use crate::generator::{CameraPose, Generator, Scene};
use crate::nn::{lora_finetune_step, Adam, LoraMlp, MlpConfig, MlpDenoiser};
use crate::prior::{Component, GaussianMixturePrior};
use crate::sampler::AuxRule;

/// Component scale of the empirical particle mixture.
const EMPIRICAL_SCALE: f64 = 1e-9;

/// `D_phi(x; sigma) = anchor(x; sigma) + c_out F_adapted(...)`.
pub struct AnchoredDenoiser<'a> {
    pub lora: &'a LoraMlp,
    pub anchor: &'a dyn Denoiser,
}

impl Denoiser for AnchoredDenoiser<'_> {
    fn dim(&self) -> usize {
        self.lora.dim()
    }

    fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        if sigma == 0.0 {
            return Ok(x.to_vec());
        }
        self.lora.anchored(Some(self.anchor)).forward(x, sigma, &[])
    }
}

/// A per-update view of the aux model.
pub enum AuxInstance<'a> {
    Ideal,
    Borrowed(&'a dyn Denoiser),
    Owned(Box<dyn Denoiser + 'a>),
}

impl AuxInstance<'_> {
    pub fn rule(&self) -> AuxRule<'_> {
        match self {
            Self::Ideal => AuxRule::Ideal,
            Self::Borrowed(d) => AuxRule::Model(*d),
            Self::Owned(d) => AuxRule::Model(d.as_ref()),
        }
    }
}

/// Aux model state carried through a run.
pub enum AuxState {
    Ideal,
    Prior,
    Analytic,
    /// One adapter shared by all poses, or one per pose with pose conditioning.
    Lora { nets: Vec<LoraMlp>, optimizers: Vec<Adam>, training: bool },
}

impl AuxState {
    /// `n_poses` sizes the per-pose adapter table when pose conditioning is on.
    pub fn new(cfg: &DistillConfig, gen: &Generator, n_poses: usize) -> Result<Self> {
        Ok(match cfg.aux {
            AuxMode::Ideal => Self::Ideal,
            AuxMode::Prior => Self::Prior,
            AuxMode::Analytic => Self::Analytic,
            AuxMode::Lora => {
                let mut mc = MlpConfig::new(gen.render_dim(), cfg.aux_hidden.clone());
                mc.zero_head = true;
                let base = Arc::new(MlpDenoiser::new(mc, crate::rng::derive_key(cfg.seed, &[0xa0]))?);
                let count = if cfg.aux_pose_conditioning { n_poses.max(1) } else { 1 };
                let nets = (0..count)
                    .map(|k| LoraMlp::new(base.clone(), cfg.lora, crate::rng::derive_key(cfg.seed, &[0xa1, k as u64])))
                    .collect::<Result<Vec<_>>>()?;
                let optimizers = nets.iter().map(|n| Adam::new(cfg.aux_dsm.adam, n.adapter.num_params())).collect();
                Self::Lora { nets, optimizers, training: cfg.aux_training }
            }
        })
    }

    /// `D_phi` for pose index `view`; `prior` is that view's `D_p`.
    pub fn instance<'a>(
        &'a self,
        gen: &Generator,
        scene: &Scene,
        view: usize,
        prior: &'a dyn Denoiser,
    ) -> Result<AuxInstance<'a>> {
        Ok(match self {
            Self::Ideal => AuxInstance::Ideal,
            Self::Prior => AuxInstance::Borrowed(prior),
            Self::Analytic => match gen {
                Generator::Particles { count, .. } => {
                    let w = 1.0 / *count as f64;
                    let comps = (0..*count)
                        .map(|i| {
                            let mean = gen.render(scene, &CameraPose::Particle { index: i })?;
                            Ok(Component { weight: w, mean, scale: EMPIRICAL_SCALE })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    AuxInstance::Owned(Box::new(GaussianMixturePrior::normalized(comps, None)?))
                }
                // One render per pose: the rendered distribution is a point mass.
                _ => AuxInstance::Ideal,
            },
            Self::Lora { nets, .. } => {
                AuxInstance::Owned(Box::new(AnchoredDenoiser { lora: &nets[view % nets.len()], anchor: prior }))
            }
        })
    }

    /// One adapter DSM step on a fresh render; returns the network
    /// evaluations it spent.
    pub fn train(
        &mut self,
        render: &[f64],
        view: usize,
        prior: &dyn Denoiser,
        cfg: &DistillConfig,
        rng: &mut impl Rng,
    ) -> Result<usize> {
        match self {
            Self::Lora { nets, optimizers, training: true } => {
                let k = view % nets.len();
                // The same render under `batch_size` independent noise draws.
                let batch = vec![render.to_vec(); cfg.aux_dsm.batch_size];
                lora_finetune_step(&mut nets[k], &mut optimizers[k], &batch, &[], Some(prior), &cfg.aux_dsm, rng)?;
                Ok(batch.len())
            }
            _ => Ok(0),
        }
    }
}
