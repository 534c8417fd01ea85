//! Generative-process solvers over a decreasing sigma grid.
//!
//! In denoiser form the probability-flow ODE reads `dx/dsigma = (x - D(x; sigma)) / sigma`.
//! A grid may end at the terminal level `sigma = 0`, where every denoiser is
//! the identity.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{check_dim, param, Error, Result};
use crate::linalg::all_finite;
use crate::rng::{gaussian_noise, stream};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Euler,
    Heun,
}

impl fmt::Display for Solver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Euler => "euler",
            Self::Heun => "heun",
        })
    }
}

impl FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Self::Euler),
            "heun" => Ok(Self::Heun),
            other => param(format!("unknown solver '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdeRunConfig {
    /// Strictly decreasing; a trailing 0 is allowed.
    pub grid: Vec<f64>,
    pub solver: Solver,
    pub omega: f64,
    pub label: Option<String>,
    pub seed: u64,
}

impl OdeRunConfig {
    pub fn new(grid: Vec<f64>, solver: Solver) -> Self {
        Self { grid, solver, omega: 0.0, label: None, seed: 0 }
    }

    /// Karras grid with the terminal zero appended.
    pub fn karras(n_steps: usize, solver: Solver) -> Result<Self> {
        Ok(Self::new(NoiseSchedule::with_steps(n_steps)?.sigma_grid_with_terminal()?, solver))
    }

    pub fn validate(&self) -> Result<()> {
        validate_grid(&self.grid)
    }
}

pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Schedule("empty sigma grid".into()));
    }
    if grid.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::Schedule("sigma grid entries must be finite and >= 0".into()));
    }
    if grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Schedule("sigma grid must be strictly decreasing".into()));
    }
    Ok(())
}

fn check_pair(sigma_cur: f64, sigma_next: f64) -> Result<()> {
    if !(sigma_cur > 0.0 && sigma_next >= 0.0 && sigma_cur > sigma_next) {
        return Err(Error::Schedule(format!(
            "step needs sigma_cur > sigma_next >= 0, got ({sigma_cur}, {sigma_next})"
        )));
    }
    Ok(())
}

fn slope(d: &dyn Denoiser, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
    let den = d.denoise(x, sigma)?;
    Ok(x.iter().zip(&den).map(|(xi, di)| (xi - di) / sigma).collect())
}

/// One Euler step of the PF ODE from `sigma_cur` to `sigma_next`.
pub fn euler_step(d: &dyn Denoiser, x: &[f64], sigma_cur: f64, sigma_next: f64) -> Result<Vec<f64>> {
    check_pair(sigma_cur, sigma_next)?;
    check_dim(d.dim(), x.len(), "sampler state")?;
    let k = slope(d, x, sigma_cur)?;
    let h = sigma_next - sigma_cur;
    Ok(x.iter().zip(&k).map(|(xi, ki)| xi + h * ki).collect())
}

/// Heun (trapezoidal) step; falls back to Euler when stepping to sigma = 0.
pub fn heun_step(d: &dyn Denoiser, x: &[f64], sigma_cur: f64, sigma_next: f64) -> Result<Vec<f64>> {
    check_pair(sigma_cur, sigma_next)?;
    check_dim(d.dim(), x.len(), "sampler state")?;
    let k1 = slope(d, x, sigma_cur)?;
    let h = sigma_next - sigma_cur;
    let pred: Vec<f64> = x.iter().zip(&k1).map(|(xi, ki)| xi + h * ki).collect();
    if sigma_next == 0.0 {
        return Ok(pred);
    }
    let k2 = slope(d, &pred, sigma_next)?;
    Ok(x.iter().zip(k1.iter().zip(&k2)).map(|(xi, (a, b))| xi + 0.5 * h * (a + b)).collect())
}

fn ode_step(solver: Solver, d: &dyn Denoiser, x: &[f64], sc: f64, sn: f64) -> Result<Vec<f64>> {
    match solver {
        Solver::Euler => euler_step(d, x, sc, sn),
        Solver::Heun => heun_step(d, x, sc, sn),
    }
}

fn ensure_finite(x: &[f64], step: usize) -> Result<()> {
    if !all_finite(x) {
        return Err(Error::Numerical { step, detail: "sampler state".into() });
    }
    Ok(())
}

/// Integrates the PF ODE across the grid; returns one state per grid point.
pub fn pf_ode_sample(d: &dyn Denoiser, cfg: &OdeRunConfig, x_init: &[f64]) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    check_dim(d.dim(), x_init.len(), "initial state")?;
    ensure_finite(x_init, 0)?;
    let mut traj = Vec::with_capacity(cfg.grid.len());
    traj.push(x_init.to_vec());
    for (i, w) in cfg.grid.windows(2).enumerate() {
        let next = ode_step(cfg.solver, d, traj.last().expect("non-empty"), w[0], w[1])?;
        ensure_finite(&next, i + 1)?;
        traj.push(next);
    }
    Ok(traj)
}

/// Final PF-ODE states for many initial points (order preserved).
pub fn pf_ode_batch(d: &dyn Denoiser, cfg: &OdeRunConfig, inits: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    inits
        .par_iter()
        .map(|x0| {
            let mut x = x0.clone();
            check_dim(d.dim(), x.len(), "initial state")?;
            for (i, w) in cfg.grid.windows(2).enumerate() {
                x = ode_step(cfg.solver, d, &x, w[0], w[1])?;
                ensure_finite(&x, i + 1)?;
            }
            Ok(x)
        })
        .collect()
}

/// Draws `count` initial states `N(0, sigma_max^2 I)` from the seed.
pub fn noise_inits(dim: usize, sigma_max: f64, count: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..count).map(|k| gaussian_noise(&mut stream(seed, &[0x1417, k as u64]), dim, sigma_max)).collect()
}

/// Euler-Maruyama integration of the reverse SDE.
///
/// `churn` scales the Langevin part: the drift is `(1 + churn)` times the PF
/// ODE drift and the injected noise has variance `churn (sigma_cur^2 -
/// sigma_next^2)`. `churn = 1` is the SDE with `g(t) = sqrt(2 sigma' sigma)`;
/// `churn = 0` is exactly the Euler PF ODE.
pub fn reverse_sde_sample(
    d: &dyn Denoiser,
    cfg: &OdeRunConfig,
    churn: f64,
    rng: &mut impl Rng,
    x_init: &[f64],
) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_dim(d.dim(), x_init.len(), "initial state")?;
    if !(0.0..=1.0).contains(&churn) {
        return param(format!("churn must lie in [0, 1], got {churn}"));
    }
    let mut x = x_init.to_vec();
    for (i, w) in cfg.grid.windows(2).enumerate() {
        let (sc, sn) = (w[0], w[1]);
        check_pair(sc, sn)?;
        let k = slope(d, &x, sc)?;
        let h = (1.0 + churn) * (sn - sc);
        let std = (churn * (sc * sc - sn * sn)).sqrt();
        let z = gaussian_noise(rng, x.len(), 1.0);
        for ((xi, ki), zi) in x.iter_mut().zip(&k).zip(&z) {
            *xi += h * ki + std * zi;
        }
        ensure_finite(&x, i + 1)?;
    }
    Ok(x)
}

/// Grid restricted to levels strictly below `sigma_start`, prefixed by it.
pub fn truncate_grid(grid: &[f64], sigma_start: f64) -> Vec<f64> {
    std::iter::once(sigma_start).chain(grid.iter().copied().filter(|&s| s < sigma_start)).collect()
}

/// Noise the source to `sigma(t_start)` and integrate the PF ODE from there.
pub fn sdedit_translate(
    d: &dyn Denoiser,
    schedule: &NoiseSchedule,
    x_source: &[f64],
    t_start: f64,
    cfg: &OdeRunConfig,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if !(t_start > 0.0 && t_start <= 1.0) {
        return param(format!("t_start must lie in (0, 1], got {t_start}"));
    }
    check_dim(d.dim(), x_source.len(), "source")?;
    let sigma = schedule.sigma_of_t(t_start)?;
    let noisy = crate::linalg::add(x_source, &gaussian_noise(rng, x_source.len(), sigma));
    let sub = OdeRunConfig { grid: truncate_grid(&cfg.grid, sigma), ..cfg.clone() };
    let traj = pf_ode_sample(d, &sub, &noisy)?;
    Ok(traj.into_iter().last().expect("non-empty trajectory"))
}

/// Auxiliary rendered-distribution denoiser `D_phi`.
#[derive(Clone, Copy)]
pub enum AuxRule<'a> {
    /// `D_phi(x + n; sigma) = x`: returns the clean state.
    Ideal,
    Model(&'a dyn Denoiser),
}

impl fmt::Debug for AuxRule<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Ideal => f.write_str("Ideal"),
            Self::Model(_) => f.write_str("Model"),
        }
    }
}

impl AuxRule<'_> {
    pub fn eval(&self, clean: &[f64], noisy: &[f64], sigma: f64) -> Result<Vec<f64>> {
        match self {
            Self::Ideal => Ok(clean.to_vec()),
            Self::Model(d) => d.denoise(noisy, sigma),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoisePolicy {
    /// Both denoisers see the same perturbed point.
    Shared,
    /// Each denoiser gets its own noise draw.
    Independent,
}

/// Schrodinger-bridge PF-ODE displacement for one step:
/// `((sigma_next - sigma) / sigma) (D_phi(x + n) - D_p(x + n))`.
pub fn sb_displacement(
    prior: &dyn Denoiser,
    aux: AuxRule<'_>,
    x: &[f64],
    sigma: f64,
    sigma_next: f64,
    policy: NoisePolicy,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    check_pair(sigma, sigma_next)?;
    let n = gaussian_noise(rng, x.len(), sigma);
    let noisy = crate::linalg::add(x, &n);
    let dp = prior.denoise(&noisy, sigma)?;
    let dq = match policy {
        NoisePolicy::Shared => aux.eval(x, &noisy, sigma)?,
        NoisePolicy::Independent => {
            let n2 = gaussian_noise(rng, x.len(), sigma);
            aux.eval(x, &crate::linalg::add(x, &n2), sigma)?
        }
    };
    let f = (sigma_next - sigma) / sigma;
    Ok(dq.iter().zip(&dp).map(|(q, p)| f * (q - p)).collect())
}

/// Integrates the Schrodinger-bridge PF ODE from a source image.
///
/// Heun re-evaluates both denoisers at the predicted point with the step's
/// noise draw.
pub fn sb_pf_ode_image(
    prior: &dyn Denoiser,
    aux: AuxRule<'_>,
    cfg: &OdeRunConfig,
    x_source: &[f64],
    policy: NoisePolicy,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    check_dim(prior.dim(), x_source.len(), "source")?;
    let mut traj = vec![x_source.to_vec()];
    for (i, w) in cfg.grid.windows(2).enumerate() {
        let (sc, sn) = (w[0], w[1]);
        let x = traj.last().expect("non-empty");
        let mut rng = stream(cfg.seed, &[0x5b, i as u64]);
        let next = match cfg.solver {
            Solver::Euler => {
                let delta = sb_displacement(prior, aux, x, sc, sn, policy, &mut rng)?;
                crate::linalg::add(x, &delta)
            }
            Solver::Heun => sb_heun(prior, aux, x, sc, sn, policy, &mut rng)?,
        };
        ensure_finite(&next, i + 1)?;
        traj.push(next);
    }
    Ok(traj)
}

fn sb_heun(
    prior: &dyn Denoiser,
    aux: AuxRule<'_>,
    x: &[f64],
    sc: f64,
    sn: f64,
    policy: NoisePolicy,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    check_pair(sc, sn)?;
    let dim = x.len();
    let n1 = gaussian_noise(rng, dim, 1.0);
    let n2 = match policy {
        NoisePolicy::Shared => n1.clone(),
        NoisePolicy::Independent => gaussian_noise(rng, dim, 1.0),
    };
    // drift per unit sigma: (D_phi - D_p) / sigma at a point and level
    let drift = |y: &[f64], s: f64| -> Result<Vec<f64>> {
        let yp: Vec<f64> = y.iter().zip(&n1).map(|(a, z)| a + s * z).collect();
        let yq: Vec<f64> = y.iter().zip(&n2).map(|(a, z)| a + s * z).collect();
        let dp = prior.denoise(&yp, s)?;
        let dq = aux.eval(y, &yq, s)?;
        Ok(dq.iter().zip(&dp).map(|(q, p)| (q - p) / s).collect())
    };
    let h = sn - sc;
    let k1 = drift(x, sc)?;
    let pred: Vec<f64> = x.iter().zip(&k1).map(|(a, k)| a + h * k).collect();
    if sn == 0.0 {
        return Ok(pred);
    }
    let k2 = drift(&pred, sn)?;
    Ok(x.iter().zip(k1.iter().zip(&k2)).map(|(a, (p, q))| a + 0.5 * h * (p + q)).collect())
}
