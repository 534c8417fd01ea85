use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::nn::{AdamConfig, DsmConfig, LoraConfig, Weighting};
use crate::schedule::{NoiseSchedule, StagePreset, StageWindow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sds,
    Vsd,
    /// VSD with `t` decreasing linearly over the run instead of drawn at random.
    VsdAnnealed,
    Apfo,
}

impl Method {
    pub const ALL: [Method; 4] = [Self::Sds, Self::Vsd, Self::VsdAnnealed, Self::Apfo];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sds => "sds",
            Self::Vsd => "vsd",
            Self::VsdAnnealed => "vsd_annealed",
            Self::Apfo => "apfo",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown method '{s}'")))
    }
}

/// How the rendered-distribution denoiser `D_phi` / `D_q` is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxMode {
    /// `D(x + n; sigma) = x`
    Ideal,
    /// Exact denoiser of the empirical rendered distribution.
    Analytic,
    /// Adapter-wrapped network fine-tuned on renders.
    Lora,
    /// `D_phi = D_p` (zero displacement; diagnostics only).
    Prior,
}

impl FromStr for AuxMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ideal" => Ok(Self::Ideal),
            "analytic" => Ok(Self::Analytic),
            "lora" => Ok(Self::Lora),
            "prior" => Ok(Self::Prior),
            other => param(format!("unknown aux mode '{other}'")),
        }
    }
}

impl fmt::Display for AuxMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ideal => "ideal",
            Self::Analytic => "analytic",
            Self::Lora => "lora",
            Self::Prior => "prior",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Adam(AdamConfig),
    Sgd { lr: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::Adam(AdamConfig::with_lr(3e-4))
    }
}

/// Weighting `lambda(t)` times a positive constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Lambda {
    pub weighting: Weighting,
    pub scale: f64,
}

impl Default for Lambda {
    fn default() -> Self {
        Self { weighting: Weighting::Edm, scale: 1.0 }
    }
}

impl Lambda {
    pub fn at(&self, sigma: f64) -> f64 {
        self.scale * self.weighting.weight(sigma)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub method: Method,
    pub lambda: Lambda,
    /// Guidance scale; applied only when `label` is set.
    pub omega: f64,
    pub label: Option<String>,
    pub aux: AuxMode,
    /// One adapter DSM step per rendered view (LoRA aux only).
    pub aux_training: bool,
    /// Keep a separate adapter per camera pose (a lookup-table pose embedding).
    pub aux_pose_conditioning: bool,
    pub lora: LoraConfig,
    pub aux_hidden: Vec<usize>,
    pub aux_dsm: DsmConfig,
    /// Inner optimizer steps per APFO target (`K`).
    pub inner_steps: usize,
    pub optimizer: OptimizerConfig,
    /// Scheduled window for APFO.
    pub window: StageWindow,
    /// `t` range for SDS/VSD: uniform draws, or the annealing endpoints.
    pub t_range: (f64, f64),
    /// Number of SDS/VSD updates.
    pub total_steps: usize,
    pub schedule: NoiseSchedule,
    pub stage: String,
    pub seed: u64,
    /// Zero the wall-clock column so reruns are byte-identical.
    pub reproducible: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            method: Method::Apfo,
            lambda: Lambda::default(),
            omega: 0.0,
            label: None,
            aux: AuxMode::Analytic,
            aux_training: true,
            aux_pose_conditioning: false,
            lora: LoraConfig::default(),
            aux_hidden: vec![32],
            aux_dsm: DsmConfig { batch_size: 4, adam: AdamConfig::with_lr(1e-2), ..DsmConfig::default() },
            inner_steps: 3,
            optimizer: OptimizerConfig::default(),
            window: StagePreset::Nerf.window(),
            t_range: (0.02, 0.98),
            total_steps: 1000,
            schedule: NoiseSchedule::default(),
            stage: "main".into(),
            seed: 0,
            reproducible: true,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_steps == 0 {
            return param("inner_steps (K) must be >= 1");
        }
        self.window.validate()?;
        self.schedule.validate()?;
        let (lo, hi) = self.t_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return param(format!("t_range must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"));
        }
        if !(self.lambda.scale > 0.0 && self.lambda.scale.is_finite()) {
            return param("lambda scale must be positive");
        }
        if !self.omega.is_finite() {
            return param("omega must be finite");
        }
        match self.optimizer {
            OptimizerConfig::Adam(a) if !(a.lr > 0.0) => return param("optimizer lr must be positive"),
            OptimizerConfig::Sgd { lr } if !(lr > 0.0) => return param("optimizer lr must be positive"),
            _ => {}
        }
        if self.method != Method::Apfo && self.total_steps == 0 {
            return param("total_steps must be >= 1");
        }
        Ok(())
    }

    /// Evaluations of `D_p` plus `D_phi` per update, excluding adapter training.
    pub fn evals_per_update(&self) -> usize {
        match self.method {
            Method::Sds => 1,
            _ => 2,
        }
    }
}
