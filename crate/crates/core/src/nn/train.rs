//! Training loop for the neural prior denoiser.

use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::dsm::{dsm_loss, DsmConfig};
use super::mlp::{MlpConfig, MlpDenoiser};
use crate::error::{param, Error, Result};
use crate::prior::GaussianMixturePrior;
use crate::rng::{gaussian_noise, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub dsm: DsmConfig,
    /// Linearly anneal the learning rate to zero over the run.
    pub lr_decay: bool,
    pub seed: u64,
    /// Record a loss row every this many steps (0 = only the last).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64], dsm: DsmConfig::default(), lr_decay: true, seed: 0, log_every: 100 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    /// `(step, mean DSM loss since the previous row)`
    pub rows: Vec<(usize, f64)>,
}

/// Trains an MLP denoiser on fresh draws from `gmm` at every step.
pub fn train_prior_net(gmm: &GaussianMixturePrior, steps: usize, cfg: &TrainConfig) -> Result<(MlpDenoiser, TrainLog)> {
    if steps == 0 {
        return param("training needs steps >= 1");
    }
    cfg.dsm.validate()?;
    let mut net = MlpDenoiser::new(MlpConfig::new(gmm.dim(), cfg.hidden.clone()), cfg.seed)?;
    let mut opt = Adam::new(cfg.dsm.adam, net.num_params());
    let base_lr = cfg.dsm.adam.lr;
    let mut log = TrainLog::default();
    let mut acc = 0.0;
    let mut acc_n = 0usize;
    for step in 0..steps {
        let mut rng = stream(cfg.seed, &[1, step as u64]);
        let batch = gmm.sample(&mut rng, cfg.dsm.batch_size)?;
        let (loss, grads) = dsm_loss(&net, &batch, &[], &mut rng, &cfg.dsm)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training { step, detail: format!("DSM loss {loss}") });
        }
        if cfg.lr_decay {
            opt.config.lr = base_lr * (1.0 - step as f64 / steps as f64);
        }
        opt.step(net.params_mut(), &grads);
        acc += loss;
        acc_n += 1;
        let last = step + 1 == steps;
        if last || (cfg.log_every > 0 && (step + 1) % cfg.log_every == 0) {
            log.rows.push((step + 1, acc / acc_n as f64));
            acc = 0.0;
            acc_n = 0;
        }
    }
    Ok((net, log))
}

/// Relative errors `|D_net - D_true| / |D_true|` over a sigma grid and a
/// held-out sample set, with noisy inputs `x0 + sigma z`.
pub fn denoiser_relative_errors(
    net: &MlpDenoiser,
    gmm: &GaussianMixturePrior,
    sigmas: &[f64],
    held_out: &[Vec<f64>],
    seed: u64,
) -> Result<Vec<f64>> {
    let mut errs = Vec::with_capacity(sigmas.len() * held_out.len());
    for (si, &sigma) in sigmas.iter().enumerate() {
        for (k, x0) in held_out.iter().enumerate() {
            let mut rng = stream(seed, &[si as u64, k as u64]);
            let x = crate::linalg::add(x0, &gaussian_noise(&mut rng, gmm.dim(), sigma));
            let truth = gmm.denoise(&x, sigma)?;
            let got = net.forward(&x, sigma, &[])?;
            let denom = crate::linalg::norm(&truth).max(1e-12);
            errs.push(crate::linalg::norm(&crate::linalg::sub(&got, &truth)) / denom);
        }
    }
    Ok(errs)
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
