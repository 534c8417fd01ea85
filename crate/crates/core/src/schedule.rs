//! Noise-level schedules and per-stage timestep windows.
//!
//! Unit time `t` runs from 1 (pure noise, `sigma_max`) to 0 (clean data).
//! A schedule with `n_steps` levels places level `i` at `t_i = 1 - i / n_steps`
//! and appends a terminal level `sigma = 0` at `t = 0`, so the dense unit grid
//! has `n_steps + 1` points and `n_steps` solver steps.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};

pub const DEFAULT_SIGMA_MIN: f64 = 0.002;
pub const DEFAULT_SIGMA_MAX: f64 = 80.0;
pub const DEFAULT_RHO: f64 = 7.0;
/// Dense timestep count used for full-length optimization runs.
pub const DENSE_STEPS: usize = 800;

/// Karras-style rho-warped noise schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub n_steps: usize,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            sigma_min: DEFAULT_SIGMA_MIN,
            sigma_max: DEFAULT_SIGMA_MAX,
            rho: DEFAULT_RHO,
            n_steps: DENSE_STEPS,
        }
    }
}

impl NoiseSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, rho: f64, n_steps: usize) -> Result<Self> {
        let s = Self { sigma_min, sigma_max, rho, n_steps };
        s.validate()?;
        Ok(s)
    }

    /// Default bounds with a custom step count.
    pub fn with_steps(n_steps: usize) -> Result<Self> {
        Self::new(DEFAULT_SIGMA_MIN, DEFAULT_SIGMA_MAX, DEFAULT_RHO, n_steps)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps < 2 {
            return param(format!("schedule needs n_steps >= 2, got {}", self.n_steps));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return param(format!(
                "schedule needs 0 < sigma_min < sigma_max, got [{}, {}]",
                self.sigma_min, self.sigma_max
            ));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return param(format!("rho must be positive, got {}", self.rho));
        }
        Ok(())
    }

    /// Warped curve at fraction `f` in `[0, 1]` (0 -> sigma_max, 1 -> sigma_min).
    fn warp(&self, f: f64) -> f64 {
        let inv = 1.0 / self.rho;
        let hi = self.sigma_max.powf(inv);
        let lo = self.sigma_min.powf(inv);
        (hi + f * (lo - hi)).powf(self.rho)
    }

    /// The `n_steps` decreasing levels from `sigma_max` to `sigma_min`.
    pub fn sigma_grid(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let n = self.n_steps;
        let mut grid: Vec<f64> = (0..n).map(|i| self.warp(i as f64 / (n - 1) as f64)).collect();
        // pin endpoints against powf round-off
        grid[0] = self.sigma_max;
        grid[n - 1] = self.sigma_min;
        Ok(grid)
    }

    /// `sigma_grid` followed by the terminal level 0.
    pub fn sigma_grid_with_terminal(&self) -> Result<Vec<f64>> {
        let mut g = self.sigma_grid()?;
        g.push(0.0);
        Ok(g)
    }

    /// Unit time of dense level `i` (level `n_steps` is the terminal zero).
    pub fn t_of_index(&self, i: usize) -> f64 {
        (self.n_steps - i.min(self.n_steps)) as f64 / self.n_steps as f64
    }

    /// Noise level at unit time `t`.
    ///
    /// On `[t_{n-1}, 1]` this is the warped curve itself; below `t_{n-1}` it
    /// falls linearly from `sigma_min` to the terminal zero.
    pub fn sigma_of_t(&self, t: f64) -> Result<f64> {
        self.validate()?;
        if !(0.0..=1.0).contains(&t) {
            return param(format!("t must lie in [0, 1], got {t}"));
        }
        let n = self.n_steps as f64;
        let t_last = 1.0 / n;
        if t >= t_last {
            if t == 1.0 {
                return Ok(self.sigma_max);
            }
            let f = ((1.0 - t) * n / (n - 1.0)).min(1.0);
            Ok(self.warp(f))
        } else {
            Ok(self.sigma_min * t / t_last)
        }
    }

    /// Dense indices (into `sigma_grid_with_terminal`) covered by a window,
    /// after striding.
    pub fn window_indices(&self, window: &StageWindow) -> Result<Vec<usize>> {
        self.validate()?;
        window.validate()?;
        let n = self.n_steps as f64;
        let eps = 1e-9;
        let first = ((1.0 - window.t_start) * n - eps).ceil().max(0.0) as usize;
        let last = (((1.0 - window.t_end) * n + eps).floor() as usize).min(self.n_steps);
        if first > last {
            return Err(Error::Schedule(format!(
                "window ({}, {}) covers no dense timestep",
                window.t_start, window.t_end
            )));
        }
        Ok((first..=last).step_by(window.spacing).collect())
    }

    /// Decreasing sigma sub-grid for a stage window.
    pub fn window_grid(&self, window: &StageWindow) -> Result<Vec<f64>> {
        let idx = self.window_indices(window)?;
        idx.iter().map(|&i| self.sigma_of_t(self.t_of_index(i))).collect()
    }
}

impl Default for StageWindow {
    fn default() -> Self {
        StagePreset::Nerf.window()
    }
}

/// Timestep window used by one coarse-to-fine stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageWindow {
    pub t_start: f64,
    pub t_end: f64,
    pub views_per_step: usize,
    pub spacing: usize,
}

impl StageWindow {
    pub fn new(t_start: f64, t_end: f64, views_per_step: usize, spacing: usize) -> Result<Self> {
        let w = Self { t_start, t_end, views_per_step, spacing };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.t_start) || !unit.contains(&self.t_end) || self.t_start <= self.t_end {
            return param(format!(
                "window needs 1 >= t_start > t_end >= 0, got ({}, {})",
                self.t_start, self.t_end
            ));
        }
        if self.views_per_step == 0 || self.spacing == 0 {
            return param("window views_per_step and spacing must be >= 1");
        }
        Ok(())
    }
}

/// Named stage windows of the coarse-to-fine framework.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StagePreset {
    Nerf,
    Geometry,
    Texture,
    Refine,
}

impl StagePreset {
    pub const ALL: [StagePreset; 4] = [Self::Nerf, Self::Geometry, Self::Texture, Self::Refine];

    pub fn window(self) -> StageWindow {
        let (t_start, t_end, views_per_step, spacing) = match self {
            Self::Nerf => (1.0, 0.2, 5, 1),
            Self::Geometry => (0.8, 0.4, 5, 1),
            Self::Texture => (0.5, 0.1, 5, 1),
            Self::Refine => (0.3, 0.0, 10, 10),
        };
        StageWindow { t_start, t_end, views_per_step, spacing }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Nerf => "nerf",
            Self::Geometry => "geometry",
            Self::Texture => "texture",
            Self::Refine => "refine",
        }
    }
}

impl fmt::Display for StagePreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StagePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nerf" => Ok(Self::Nerf),
            "geometry" => Ok(Self::Geometry),
            "texture" => Ok(Self::Texture),
            "refine" => Ok(Self::Refine),
            other => param(format!("unknown stage preset '{other}'")),
        }
    }
}

/// Looks up a stage window by preset name.
pub fn stage_preset(name: &str) -> Result<StageWindow> {
    Ok(name.parse::<StagePreset>()?.window())
}
