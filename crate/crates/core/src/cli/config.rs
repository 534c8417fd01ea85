//! Run configuration: flat dotted `key = value` text or JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::distill::{AuxMode, DistillConfig, Method};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, DsmConfig, TrainConfig, Weighting};
use crate::prior::Component;
use crate::sampler::Solver;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    /// Single isotropic Gaussian `N(mean, scale^2 I)`.
    Gaussian,
    /// Two-component 2-D mixture preset.
    Mixture2d,
    /// Explicit `components`.
    Mixture,
    /// `labels` Gaussians `separation` scales apart (conditional set).
    Labels,
    /// Multi-view blob benchmark with per-view Gaussian priors.
    Benchmark,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSpec {
    pub kind: PriorKind,
    pub mean: Vec<f64>,
    /// Component scale; unset means 0.02 for the benchmark and 0.5 otherwise.
    pub scale: Option<f64>,
    pub components: Vec<Component>,
    pub labels: usize,
    pub dim: usize,
    pub separation: f64,
    pub views: usize,
    pub size: usize,
    pub scene_seed: u64,
    /// Trained denoiser checkpoint to use instead of the analytic one.
    pub checkpoint: Option<PathBuf>,
}

impl PriorSpec {
    pub fn scale(&self) -> f64 {
        self.scale.unwrap_or(if self.kind == PriorKind::Benchmark { 0.02 } else { 0.5 })
    }
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            kind: PriorKind::Gaussian,
            mean: vec![1.0],
            scale: None,
            components: Vec::new(),
            labels: 10,
            dim: 10,
            separation: 5.0,
            views: 8,
            size: 32,
            scene_seed: 0,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    /// Multi-view for benchmark priors, identity otherwise.
    Auto,
    Identity,
    Particles,
    Multiview,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    /// Particle count.
    pub count: usize,
    /// Std of the seeded initial scene (0 starts from zeros).
    pub init_scale: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self { kind: GeneratorKind::Auto, count: 16, init_scale: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub steps: usize,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub weighting: Weighting,
    pub lr_decay: bool,
    pub log_every: usize,
    /// Evaluation grid: `eval_points` log-spaced levels on `[eval_sigma_min, eval_sigma_max]`.
    pub eval_sigma_min: f64,
    pub eval_sigma_max: f64,
    pub eval_points: usize,
    pub held_out: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            steps: 20_000,
            hidden: vec![64, 64],
            lr: 2e-3,
            batch_size: 32,
            sigma_min: 0.005,
            sigma_max: 20.0,
            weighting: Weighting::Edm,
            lr_decay: true,
            log_every: 500,
            eval_sigma_min: 0.01,
            eval_sigma_max: 10.0,
            eval_points: 21,
            held_out: 64,
        }
    }
}

impl TrainSpec {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            hidden: self.hidden.clone(),
            dsm: DsmConfig {
                weighting: self.weighting,
                sigma_min: self.sigma_min,
                sigma_max: self.sigma_max,
                batch_size: self.batch_size,
                adam: AdamConfig::with_lr(self.lr),
            },
            lr_decay: self.lr_decay,
            seed,
            log_every: self.log_every,
        }
    }

    pub fn eval_sigmas(&self) -> Vec<f64> {
        let n = self.eval_points.max(2);
        let (a, b) = (self.eval_sigma_min.ln(), self.eval_sigma_max.ln());
        (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Ode,
    Sde,
    Sdedit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSpec {
    pub mode: SampleMode,
    /// Karras steps; 0 gives the length-1 grid `[sigma_max]`.
    pub steps: usize,
    pub solver: Solver,
    pub count: usize,
    pub churn: f64,
    /// SDEdit start time and source point.
    pub t_start: f64,
    pub source: Vec<f64>,
    /// Record the trajectory of the first sample.
    pub trajectory: bool,
    pub n_proj: usize,
}

impl Default for SampleSpec {
    fn default() -> Self {
        Self {
            mode: SampleMode::Ode,
            steps: 200,
            solver: Solver::Heun,
            count: 4096,
            churn: 1.0,
            t_start: 0.5,
            source: Vec::new(),
            trajectory: true,
            n_proj: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSpec {
    /// Run the four preset windows; otherwise one stage from `distill`.
    pub preset: bool,
    pub base_size: usize,
}

impl Default for PipelineSpec {
    fn default() -> Self {
        Self { preset: true, base_size: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSpec {
    pub methods: Vec<Method>,
    pub seeds: usize,
    /// Aux mode for the VSD variants.
    pub vsd_aux: AuxMode,
}

impl Default for CompareSpec {
    fn default() -> Self {
        Self { methods: Method::ALL.to_vec(), seeds: 5, vsd_aux: AuxMode::Lora }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalKind {
    /// Scene checkpoint against the benchmark ground truth.
    Scene,
    /// Label retrieval from APFO-optimized scenes.
    Retrieval,
    /// Samples CSV against direct prior samples.
    Samples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub kind: EvalKind,
    pub input: Option<PathBuf>,
    pub scenes_per_label: usize,
    pub n_proj: usize,
    pub mmd_bandwidth: f64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self { kind: EvalKind::Retrieval, input: None, scenes_per_label: 3, n_proj: 128, mmd_bandwidth: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmitFlags {
    pub csv: bool,
    pub svg: bool,
    pub pgm: bool,
    pub checkpoints: bool,
}

impl Default for EmitFlags {
    fn default() -> Self {
        Self { csv: true, svg: true, pgm: true, checkpoints: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: String,
    /// Required, from the file or `--seed`.
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub prior: PriorSpec,
    pub generator: GeneratorSpec,
    pub distill: DistillConfig,
    pub train: TrainSpec,
    pub sample: SampleSpec,
    pub pipeline: PipelineSpec,
    pub compare: CompareSpec,
    pub eval: EvalSpec,
    pub emit: EmitFlags,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: "run".into(),
            seed: None,
            out: PathBuf::from("out"),
            prior: PriorSpec::default(),
            generator: GeneratorSpec::default(),
            distill: DistillConfig::default(),
            train: TrainSpec::default(),
            sample: SampleSpec::default(),
            pipeline: PipelineSpec::default(),
            compare: CompareSpec::default(),
            eval: EvalSpec::default(),
            emit: EmitFlags::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn insert_dotted(root: &mut Map<String, Value>, key: &str, value: Value, line: usize) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("line {line}: malformed key '{key}'")));
    }
    let mut node = root;
    for p in &parts[..parts.len() - 1] {
        let entry = node.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
        node = entry
            .as_object_mut()
            .ok_or_else(|| config_err(format!("line {line}: '{p}' is both a value and a section")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Parses flat text: `a.b = value` lines, `[section]` prefixes, `#` comments.
/// Values are JSON when they parse as JSON, bare strings otherwise.
pub fn parse_flat(text: &str) -> Result<Value> {
    let mut root = Map::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_err(format!("line {}: expected 'key = value'", i + 1)))?;
        let key = if section.is_empty() { k.trim().to_string() } else { format!("{section}.{}", k.trim()) };
        insert_dotted(&mut root, &key, parse_scalar(v.trim()), i + 1)?;
    }
    Ok(Value::Object(root))
}

fn flatten_into(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, child, out);
            }
        }
        Value::String(s) if serde_json::from_str::<Value>(s).is_err() && !s.is_empty() && s.trim() == s => {
            out.push((prefix.to_string(), s.clone()));
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

impl RunConfig {
    pub fn from_value(v: Value) -> Result<Self> {
        serde_json::from_value(v).map_err(config_err)
    }

    /// Parses JSON (text starting with `{`) or the flat format.
    pub fn parse(text: &str) -> Result<Self> {
        let v = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(config_err)?
        } else {
            parse_flat(text)?
        };
        Self::from_value(v)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Flat `key = value` text that [`RunConfig::parse`] reads back.
    pub fn to_flat(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        let mut rows = Vec::new();
        flatten_into("", &v, &mut rows);
        rows.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    /// Digest of everything that affects results (the output directory does not).
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("out");
        }
        super::checkpoint::sha256_hex(v.to_string().as_bytes())
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| config_err("a seed is required (config 'seed' or --seed)"))
    }

    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        self.distill.validate().map_err(config_err)?;
        let p = &self.prior;
        match p.kind {
            PriorKind::Gaussian if p.mean.is_empty() || !(p.scale() > 0.0) => {
                return Err(config_err("gaussian prior needs a mean and scale > 0"))
            }
            PriorKind::Mixture if p.components.is_empty() => return Err(config_err("mixture prior needs components")),
            PriorKind::Labels if p.labels < 2 || p.dim < p.labels => {
                return Err(config_err("labels prior needs 2 <= labels <= dim"))
            }
            PriorKind::Benchmark if p.views == 0 || p.size < 4 || !(p.scale() > 0.0) => {
                return Err(config_err("benchmark prior needs views >= 1, size >= 4, scale > 0"))
            }
            _ => {}
        }
        if matches!(self.generator.kind, GeneratorKind::Multiview) != (p.kind == PriorKind::Benchmark)
            && self.generator.kind != GeneratorKind::Auto
        {
            return Err(config_err("the multiview generator goes with the benchmark prior"));
        }
        if self.generator.kind == GeneratorKind::Particles && self.generator.count == 0 {
            return Err(config_err("particle generator needs count >= 1"));
        }
        if self.sample.count == 0 || self.sample.n_proj == 0 {
            return Err(config_err("sample.count and sample.n_proj must be >= 1"));
        }
        if self.train.steps == 0 || self.train.batch_size == 0 {
            return Err(config_err("train.steps and train.batch_size must be >= 1"));
        }
        if !(self.pipeline.base_size >= 4) {
            return Err(config_err("pipeline.base_size must be >= 4"));
        }
        if self.compare.seeds == 0 || self.compare.methods.is_empty() {
            return Err(config_err("compare needs at least one seed and one method"));
        }
        Ok(())
    }
}
