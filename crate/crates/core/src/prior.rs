//! Analytic Gaussian-mixture priors.
//!
//! Every quantity a pretrained diffusion prior would estimate (smoothed
//! density, score, denoiser, guided denoiser) is available here in closed
//! form. Components are isotropic: component `k` is `N(mu_k, s_k^2 I)`, so
//! smoothing by `sigma` turns it into `N(mu_k, (s_k^2 + sigma^2) I)`.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{check_dim, param, Result};
use crate::linalg::{log_sum_exp, sq_dist};
use crate::rng::standard_normal_vec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixturePrior {
    components: Vec<Component>,
    dim: usize,
    label: Option<String>,
}

impl GaussianMixturePrior {
    /// Builds a mixture; weights must already sum to one.
    pub fn new(components: Vec<Component>, label: Option<String>) -> Result<Self> {
        let Some(first) = components.first() else {
            return param("mixture needs at least one component");
        };
        let dim = first.mean.len();
        if dim == 0 {
            return param("mixture dimension must be >= 1");
        }
        let mut total = 0.0;
        for (k, c) in components.iter().enumerate() {
            check_dim(dim, c.mean.len(), "mixture component mean")?;
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return param(format!("component {k} weight must be positive, got {}", c.weight));
            }
            if !(c.scale > 0.0 && c.scale.is_finite()) {
                return param(format!("component {k} scale must be positive, got {}", c.scale));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return param(format!("component {k} mean is not finite"));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return param(format!("mixture weights sum to {total}, expected 1"));
        }
        Ok(Self { components, dim, label })
    }

    /// Builds a mixture from unnormalized positive weights.
    pub fn normalized(mut components: Vec<Component>, label: Option<String>) -> Result<Self> {
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if !(total > 0.0 && total.is_finite()) {
            return param("mixture weights must be positive");
        }
        for c in &mut components {
            c.weight /= total;
        }
        Self::new(components, label)
    }

    /// Single isotropic Gaussian `N(mean, scale^2 I)`.
    pub fn gaussian(mean: Vec<f64>, scale: f64) -> Result<Self> {
        Self::new(vec![Component { weight: 1.0, mean, scale }], None)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn label(&self) -> Option<&str> {
        self.label.as_deref()
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    /// Weighted mean of the component means.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for c in &self.components {
            crate::linalg::axpy(c.weight, &c.mean, &mut m);
        }
        m
    }

    pub fn max_scale(&self) -> f64 {
        self.components.iter().map(|c| c.scale).fold(0.0, f64::max)
    }

    /// The same mixture convolved with `N(0, sigma^2 I)`.
    pub fn smoothed(&self, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) {
            return param(format!("sigma must be >= 0, got {sigma}"));
        }
        let components = self
            .components
            .iter()
            .map(|c| Component {
                weight: c.weight,
                mean: c.mean.clone(),
                scale: (c.scale * c.scale + sigma * sigma).sqrt(),
            })
            .collect();
        Ok(Self { components, dim: self.dim, label: self.label.clone() })
    }

    fn check(&self, x: &[f64], sigma: f64) -> Result<()> {
        check_dim(self.dim, x.len(), "mixture input")?;
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return param(format!("sigma must be finite and >= 0, got {sigma}"));
        }
        Ok(())
    }

    /// Per-component log of `w_k N(x; mu_k, v_k I)` and the variances `v_k`.
    fn log_terms(&self, x: &[f64], sigma: f64) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim as f64;
        let s2 = sigma * sigma;
        self.components
            .iter()
            .map(|c| {
                let v = c.scale * c.scale + s2;
                let lt = c.weight.ln() - 0.5 * d * (2.0 * PI * v).ln() - 0.5 * sq_dist(x, &c.mean) / v;
                (lt, v)
            })
            .unzip()
    }

    /// `log p(x; sigma)`.
    pub fn smoothed_logpdf(&self, x: &[f64], sigma: f64) -> Result<f64> {
        self.check(x, sigma)?;
        let (lt, _) = self.log_terms(x, sigma);
        Ok(log_sum_exp(&lt))
    }

    /// Posterior component responsibilities under the smoothed mixture.
    pub fn responsibilities(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.check(x, sigma)?;
        let (lt, _) = self.log_terms(x, sigma);
        let z = log_sum_exp(&lt);
        Ok(lt.iter().map(|l| (l - z).exp()).collect())
    }

    /// `grad_x log p(x; sigma)`.
    pub fn score(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.check(x, sigma)?;
        let (lt, var) = self.log_terms(x, sigma);
        let z = log_sum_exp(&lt);
        let mut s = vec![0.0; self.dim];
        for ((c, l), v) in self.components.iter().zip(&lt).zip(&var) {
            let r = (l - z).exp();
            for ((si, mi), xi) in s.iter_mut().zip(&c.mean).zip(x) {
                *si += r * (mi - xi) / v;
            }
        }
        Ok(s)
    }

    /// Posterior mean `D(x; sigma) = x + sigma^2 * score`; identity at `sigma = 0`.
    pub fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.check(x, sigma)?;
        if sigma == 0.0 {
            return Ok(x.to_vec());
        }
        let s = self.score(x, sigma)?;
        let s2 = sigma * sigma;
        Ok(x.iter().zip(&s).map(|(xi, si)| xi + s2 * si).collect())
    }

    /// I.i.d. draws: categorical component, then a Gaussian draw.
    pub fn sample(&self, rng: &mut impl Rng, count: usize) -> Result<Vec<Vec<f64>>> {
        if count == 0 {
            return param("sample count must be >= 1");
        }
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let u: f64 = rng.random();
            let c = self.pick(u);
            let z = standard_normal_vec(rng, self.dim);
            out.push(c.mean.iter().zip(&z).map(|(m, zi)| m + c.scale * zi).collect());
        }
        Ok(out)
    }

    fn pick(&self, u: f64) -> &Component {
        let mut acc = 0.0;
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                return c;
            }
        }
        self.components.last().expect("non-empty mixture")
    }
}

impl Denoiser for GaussianMixturePrior {
    fn dim(&self) -> usize {
        self.dim
    }

    fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        GaussianMixturePrior::denoise(self, x, sigma)
    }
}

/// An unconditional mixture plus labeled sub-mixtures, the inputs of
/// classifier-free guidance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalPriorSet {
    unconditional: GaussianMixturePrior,
    conditionals: Vec<(String, GaussianMixturePrior)>,
}

impl ConditionalPriorSet {
    /// A set without labels; guidance is unavailable.
    pub fn unconditional_only(prior: GaussianMixturePrior) -> Self {
        Self { unconditional: prior, conditionals: Vec::new() }
    }

    /// Builds the set from labeled sub-mixtures and their label weights.
    /// The unconditional mixture is the weight-renormalized union.
    pub fn from_conditionals(labeled: Vec<(String, GaussianMixturePrior, f64)>) -> Result<Self> {
        if labeled.is_empty() {
            return param("conditional prior set needs at least one label");
        }
        let dim = labeled[0].1.dim();
        let mut union = Vec::new();
        let mut conditionals = Vec::with_capacity(labeled.len());
        for (label, prior, w) in labeled {
            check_dim(dim, prior.dim(), "conditional prior")?;
            if !(w > 0.0 && w.is_finite()) {
                return param(format!("label '{label}' weight must be positive"));
            }
            if conditionals.iter().any(|(l, _): &(String, _)| *l == label) {
                return param(format!("duplicate label '{label}'"));
            }
            union.extend(prior.components().iter().map(|c| Component { weight: w * c.weight, ..c.clone() }));
            conditionals.push((label.clone(), prior.with_label(label)));
        }
        let unconditional = GaussianMixturePrior::normalized(union, None)?;
        Ok(Self { unconditional, conditionals })
    }

    /// Equal label weights.
    pub fn uniform(labeled: Vec<(String, GaussianMixturePrior)>) -> Result<Self> {
        Self::from_conditionals(labeled.into_iter().map(|(l, p)| (l, p, 1.0)).collect())
    }

    pub fn unconditional(&self) -> &GaussianMixturePrior {
        &self.unconditional
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.conditionals.iter().map(|(l, _)| l.as_str())
    }

    pub fn conditional(&self, label: &str) -> Result<&GaussianMixturePrior> {
        self.conditionals
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, p)| p)
            .ok_or_else(|| crate::error::Error::Parameter(format!("unknown label '{label}'")))
    }

    pub fn dim(&self) -> usize {
        self.unconditional.dim()
    }

    /// `(1 + omega) D(x; sigma, y) - omega D(x; sigma)`.
    pub fn cfg_denoise(&self, x: &[f64], sigma: f64, label: &str, omega: f64) -> Result<Vec<f64>> {
        let cond = self.conditional(label)?.denoise(x, sigma)?;
        if omega == 0.0 {
            return Ok(cond);
        }
        let unc = self.unconditional.denoise(x, sigma)?;
        if omega == -1.0 {
            return Ok(unc);
        }
        Ok(cond.iter().zip(&unc).map(|(c, u)| (1.0 + omega) * c - omega * u).collect())
    }
}

/// `n_labels` isotropic Gaussians of scale `s` whose means sit on scaled
/// coordinate axes, every pair exactly `separation * s` apart.
pub fn separated_labels(n_labels: usize, dim: usize, s: f64, separation: f64) -> Result<ConditionalPriorSet> {
    if n_labels < 2 || dim < n_labels {
        return param(format!("need 2 <= n_labels <= dim, got {n_labels} labels in {dim} dims"));
    }
    let r = separation * s / std::f64::consts::SQRT_2;
    let labeled = (0..n_labels)
        .map(|l| {
            let mut mean = vec![0.0; dim];
            mean[l] = r;
            Ok((format!("label{l}"), GaussianMixturePrior::gaussian(mean, s)?))
        })
        .collect::<Result<Vec<_>>>()?;
    ConditionalPriorSet::uniform(labeled)
}

/// Two equal-weight components at `(-1, 0)` and `(1, 0)` with scale 0.3.
pub fn two_component_2d() -> GaussianMixturePrior {
    let c = |x: f64| Component { weight: 0.5, mean: vec![x, 0.0], scale: 0.3 };
    GaussianMixturePrior::new(vec![c(-1.0), c(1.0)], None).expect("valid preset")
}

/// A prior set queried with a fixed label and guidance scale.
#[derive(Debug, Clone, Copy)]
pub struct GuidedPrior<'a> {
    pub set: &'a ConditionalPriorSet,
    pub label: Option<&'a str>,
    pub omega: f64,
}

impl<'a> GuidedPrior<'a> {
    pub fn new(set: &'a ConditionalPriorSet, label: Option<&'a str>, omega: f64) -> Self {
        Self { set, label, omega }
    }
}

impl Denoiser for GuidedPrior<'_> {
    fn dim(&self) -> usize {
        self.set.dim()
    }

    fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        match self.label {
            Some(label) => self.set.cfg_denoise(x, sigma, label, self.omega),
            None => self.set.unconditional().denoise(x, sigma),
        }
    }
}
