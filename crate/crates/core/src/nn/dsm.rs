//! Denoising score matching objective.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adam::AdamConfig;
use super::mlp::{MlpDenoiser, SIGMA_DATA};
use crate::error::{param, Error, Result};
use crate::rng::gaussian_noise;

/// Loss weighting `lambda(sigma)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Unit,
    InvSigma2,
    Edm,
}

impl Weighting {
    pub fn weight(self, sigma: f64) -> f64 {
        match self {
            Self::Unit => 1.0,
            Self::InvSigma2 => 1.0 / (sigma * sigma),
            Self::Edm => (sigma * sigma + SIGMA_DATA * SIGMA_DATA) / (sigma * SIGMA_DATA).powi(2),
        }
    }
}

impl fmt::Display for Weighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Unit => "unit",
            Self::InvSigma2 => "inv_sigma2",
            Self::Edm => "edm",
        })
    }
}

impl FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit" | "1" => Ok(Self::Unit),
            "inv_sigma2" => Ok(Self::InvSigma2),
            "edm" => Ok(Self::Edm),
            other => param(format!("unknown weighting '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DsmConfig {
    pub weighting: Weighting,
    /// Training sigmas are log-uniform on `[sigma_min, sigma_max]`.
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for DsmConfig {
    fn default() -> Self {
        Self {
            weighting: Weighting::Edm,
            sigma_min: 0.002,
            sigma_max: 80.0,
            batch_size: 32,
            adam: AdamConfig::with_lr(1e-3),
        }
    }
}

impl DsmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min <= self.sigma_max && self.sigma_max.is_finite()) {
            return param("DSM sigma range must satisfy 0 < sigma_min <= sigma_max");
        }
        if self.batch_size == 0 {
            return param("DSM batch size must be >= 1");
        }
        Ok(())
    }

    pub fn sample_sigma(&self, rng: &mut impl Rng) -> f64 {
        if self.sigma_min == self.sigma_max {
            return self.sigma_min;
        }
        let u: f64 = rng.random();
        (self.sigma_min.ln() + u * (self.sigma_max.ln() - self.sigma_min.ln())).exp()
    }
}

/// A model trainable by DSM.
pub trait DsmModel {
    fn dim(&self) -> usize;

    fn num_params(&self) -> usize;

    /// Evaluates every `(input, sigma)` pair and returns the outputs together
    /// with the parameter gradient `sum_i J_i^T cot(i, out_i)`, reduced in
    /// index order.
    fn batch_forward_vjp(
        &self,
        inputs: &[(Vec<f64>, f64)],
        cond: &[f64],
        cotangent: &mut dyn FnMut(usize, &[f64]) -> Vec<f64>,
    ) -> Result<(Vec<Vec<f64>>, Vec<f64>)>;
}

impl DsmModel for MlpDenoiser {
    fn dim(&self) -> usize {
        MlpDenoiser::dim(self)
    }

    fn num_params(&self) -> usize {
        MlpDenoiser::num_params(self)
    }

    fn batch_forward_vjp(
        &self,
        inputs: &[(Vec<f64>, f64)],
        cond: &[f64],
        cotangent: &mut dyn FnMut(usize, &[f64]) -> Vec<f64>,
    ) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let mut grads = vec![0.0; self.num_params()];
        let mut outs = Vec::with_capacity(inputs.len());
        for (i, (x, sigma)) in inputs.iter().enumerate() {
            self.forward_checked(x, *sigma, cond)?;
            let trace = self.trace(self.params(), x, *sigma, cond);
            let cot = cotangent(i, &trace.output);
            let (_, gp) = self.backward(self.params(), &trace, cond, &cot);
            crate::linalg::axpy(1.0, &gp, &mut grads);
            outs.push(trace.output);
        }
        Ok((outs, grads))
    }
}

/// Mean over the batch of `lambda(sigma) ||D(x0 + n; sigma) - x0||^2` and its
/// parameter gradient.
pub fn dsm_loss<M: DsmModel + ?Sized>(
    model: &M,
    batch: &[Vec<f64>],
    cond: &[f64],
    rng: &mut impl Rng,
    cfg: &DsmConfig,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return param("DSM batch must be non-empty");
    }
    cfg.validate()?;
    let dim = model.dim();
    let mut inputs = Vec::with_capacity(batch.len());
    let mut lambdas = Vec::with_capacity(batch.len());
    for x0 in batch {
        crate::error::check_dim(dim, x0.len(), "DSM sample")?;
        let sigma = cfg.sample_sigma(rng);
        let n = gaussian_noise(rng, dim, sigma);
        inputs.push((crate::linalg::add(x0, &n), sigma));
        lambdas.push(cfg.weighting.weight(sigma));
    }
    let inv_b = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let (_, mut grads) = model.batch_forward_vjp(&inputs, cond, &mut |i, out| {
        let lam = lambdas[i];
        let diff = crate::linalg::sub(out, &batch[i]);
        loss += lam * crate::linalg::dot(&diff, &diff);
        diff.iter().map(|d| 2.0 * lam * d * inv_b).collect()
    })?;
    loss *= inv_b;
    if !loss.is_finite() {
        grads.iter_mut().for_each(|g| *g = f64::NAN);
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::mlp::MlpConfig;
    use crate::rng::stream;

    /// Returns a fixed point regardless of input; no parameters.
    struct Fixed(Vec<f64>);

    impl DsmModel for Fixed {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn num_params(&self) -> usize {
            0
        }
        fn batch_forward_vjp(
            &self,
            inputs: &[(Vec<f64>, f64)],
            _cond: &[f64],
            cotangent: &mut dyn FnMut(usize, &[f64]) -> Vec<f64>,
        ) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
            let outs: Vec<_> = inputs.iter().map(|_| self.0.clone()).collect();
            for (i, o) in outs.iter().enumerate() {
                cotangent(i, o);
            }
            Ok((outs, vec![]))
        }
    }

    /// `D(x) = x`.
    struct Identity(usize);

    impl DsmModel for Identity {
        fn dim(&self) -> usize {
            self.0
        }
        fn num_params(&self) -> usize {
            0
        }
        fn batch_forward_vjp(
            &self,
            inputs: &[(Vec<f64>, f64)],
            _cond: &[f64],
            cotangent: &mut dyn FnMut(usize, &[f64]) -> Vec<f64>,
        ) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
            let outs: Vec<_> = inputs.iter().map(|(x, _)| x.clone()).collect();
            for (i, o) in outs.iter().enumerate() {
                cotangent(i, o);
            }
            Ok((outs, vec![]))
        }
    }

    #[test]
    fn empty_batch_rejected() {
        let net = MlpDenoiser::new(MlpConfig::new(1, vec![4]), 0).unwrap();
        assert!(dsm_loss(&net, &[], &[], &mut stream(0, &[]), &DsmConfig::default()).is_err());
    }

    #[test]
    fn dirac_data_ideal_denoiser_zero_loss() {
        let x0 = vec![0.25, -1.0];
        let batch = vec![x0.clone(); 16];
        let (loss, _) = dsm_loss(&Fixed(x0), &batch, &[], &mut stream(1, &[]), &DsmConfig::default()).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn identity_map_expected_loss() {
        // unit weighting: E ||n||^2 = dim * E[sigma^2] with log-uniform sigma on [a, b]
        let (a, b) = (0.5f64, 2.0f64);
        let dim = 3;
        let cfg = DsmConfig { weighting: Weighting::Unit, sigma_min: a, sigma_max: b, batch_size: 1, ..DsmConfig::default() };
        let e_sigma2 = (b * b - a * a) / (2.0 * (b / a).ln());
        let expect = dim as f64 * e_sigma2;
        let mut rng = stream(2, &[]);
        let reps = 20_000;
        let batch = vec![vec![0.0; dim]];
        let vals: Vec<f64> = (0..reps)
            .map(|_| dsm_loss(&Identity(dim), &batch, &[], &mut rng, &cfg).unwrap().0)
            .collect();
        let mean = vals.iter().sum::<f64>() / reps as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        let se = (var / reps as f64).sqrt();
        assert!((mean - expect).abs() <= 3.0 * se, "{mean} vs {expect} (se {se})");
    }

    #[test]
    fn weighting_values() {
        assert_eq!(Weighting::Unit.weight(3.0), 1.0);
        assert_eq!(Weighting::InvSigma2.weight(2.0), 0.25);
        let s = 2.0;
        assert!((Weighting::Edm.weight(s) - (4.25 / 1.0)).abs() < 1e-12);
        assert_eq!("edm".parse::<Weighting>().unwrap(), Weighting::Edm);
        assert!("cosine".parse::<Weighting>().is_err());
    }
}
