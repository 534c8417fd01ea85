//! Per-update gradients and targets of the three methods.

use rand::Rng;

use super::DistillConfig;
use crate::denoiser::Denoiser;
use crate::error::{param, Result};
use crate::generator::{CameraPose, Generator, Scene};
use crate::linalg::{dot, sub};
use crate::rng::gaussian_noise;
use crate::sampler::{sb_displacement, AuxRule, NoisePolicy};

/// Result of an SDS or VSD evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillGrad {
    /// `lambda J^T r`
    pub grad: Vec<f64>,
    /// `0.5 lambda ||x - sg(target)||^2`
    pub loss: f64,
    /// The stop-gradient target, so that `x - target = r`.
    pub target: Vec<f64>,
    pub render: Vec<f64>,
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return param(format!("distillation needs sigma(t) > 0, got {sigma}"));
    }
    Ok(())
}

fn sigma_lambda(t: f64, cfg: &DistillConfig) -> Result<(f64, f64)> {
    if !(t > 0.0 && t <= 1.0) {
        return param(format!("t must lie in (0, 1], got {t}"));
    }
    let sigma = cfg.schedule.sigma_of_t(t)?;
    check_sigma(sigma)?;
    Ok((sigma, cfg.lambda.at(sigma)))
}

fn finish(gen: &Generator, scene: &Scene, pose: &CameraPose, x: Vec<f64>, r: Vec<f64>, lambda: f64) -> Result<DistillGrad> {
    let mut grad = gen.vjp(scene, pose, &r)?;
    grad.iter_mut().for_each(|g| *g *= lambda);
    let loss = 0.5 * lambda * dot(&r, &r);
    let target = sub(&x, &r);
    Ok(DistillGrad { grad, loss, target, render: x })
}

/// SDS: `lambda(t) J^T (x - D_p(x + n; sigma(t)))`.
///
/// `prior` is the (possibly guided) denoiser for this view.
pub fn sds_grad(
    gen: &Generator,
    scene: &Scene,
    pose: &CameraPose,
    t: f64,
    prior: &dyn Denoiser,
    rng: &mut impl Rng,
    cfg: &DistillConfig,
) -> Result<DistillGrad> {
    let (sigma, lambda) = sigma_lambda(t, cfg)?;
    let x = gen.render(scene, pose)?;
    let n = gaussian_noise(rng, x.len(), sigma);
    let noisy: Vec<f64> = x.iter().zip(&n).map(|(a, b)| a + b).collect();
    let dp = prior.denoise(&noisy, sigma)?;
    let r: Vec<f64> = x.iter().zip(&dp).map(|(a, b)| a - b).collect();
    finish(gen, scene, pose, x, r, lambda)
}

/// VSD: `lambda(t) J^T (D_q(x + n) - D_p(x + n))` with one shared `n`.
#[allow(clippy::too_many_arguments)]
pub fn vsd_grad(
    gen: &Generator,
    scene: &Scene,
    pose: &CameraPose,
    t: f64,
    prior: &dyn Denoiser,
    aux: AuxRule<'_>,
    rng: &mut impl Rng,
    cfg: &DistillConfig,
) -> Result<DistillGrad> {
    let (sigma, lambda) = sigma_lambda(t, cfg)?;
    let x = gen.render(scene, pose)?;
    let n = gaussian_noise(rng, x.len(), sigma);
    let noisy: Vec<f64> = x.iter().zip(&n).map(|(a, b)| a + b).collect();
    let dp = prior.denoise(&noisy, sigma)?;
    let dq = aux.eval(&x, &noisy, sigma)?;
    let r: Vec<f64> = dq.iter().zip(&dp).map(|(a, b)| a - b).collect();
    finish(gen, scene, pose, x, r, lambda)
}

/// APFO regression target for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ApfoTarget {
    pub render: Vec<f64>,
    pub displacement: Vec<f64>,
    /// `sg(x + displacement)`
    pub target: Vec<f64>,
    /// `0.5 ||g(theta, c) - target||^2` before any inner step.
    pub loss: f64,
    /// Norm of the gradient of that loss at the current `theta`.
    pub grad_norm: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn apfo_target(
    gen: &Generator,
    scene: &Scene,
    pose: &CameraPose,
    sigma: f64,
    sigma_next: f64,
    prior: &dyn Denoiser,
    aux: AuxRule<'_>,
    rng: &mut impl Rng,
) -> Result<ApfoTarget> {
    if !(sigma_next < sigma) {
        return Err(crate::error::Error::Schedule(format!(
            "APFO needs a decreasing pair, got sigma {sigma} -> {sigma_next}"
        )));
    }
    check_sigma(sigma)?;
    let x = gen.render(scene, pose)?;
    let delta = sb_displacement(prior, aux, &x, sigma, sigma_next, NoisePolicy::Shared, rng)?;
    let target: Vec<f64> = x.iter().zip(&delta).map(|(a, d)| a + d).collect();
    let loss = 0.5 * dot(&delta, &delta);
    let neg: Vec<f64> = delta.iter().map(|d| -d).collect();
    let grad_norm = crate::linalg::norm(&gen.vjp(scene, pose, &neg)?);
    Ok(ApfoTarget { render: x, displacement: delta, target, loss, grad_norm })
}

/// `0.5 ||g(theta, c) - target||^2` and its gradient.
pub fn regression_loss(gen: &Generator, scene: &Scene, pose: &CameraPose, target: &[f64]) -> Result<(f64, Vec<f64>)> {
    let x = gen.render(scene, pose)?;
    let r = sub(&x, target);
    Ok((0.5 * dot(&r, &r), gen.vjp(scene, pose, &r)?))
}
