//! Coarse-to-fine multi-stage runs with resolution growth.

use serde::{Deserialize, Serialize};

use crate::distill::{run_distillation, AuxMode, DistillConfig, PriorSource, TrajectoryRecord};
use crate::error::{param, Error, Result};
use crate::generator::{standard_benchmark, Generator, Scene};
use crate::schedule::{StagePreset, StageWindow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleKernel {
    /// Half-pixel-centred bilinear interpolation with clamped edges.
    Bilinear,
    /// Pixel replication; box downsampling inverts it exactly.
    Nearest,
}

fn check_factor(scene: &Scene, factor: usize) -> Result<(usize, usize)> {
    if factor != 2 && factor != 4 {
        return param(format!("resampling factor must be 2 or 4, got {factor}"));
    }
    scene.grid().ok_or_else(|| Error::Parameter(format!("scene of shape {:?} is not a grid", scene.shape)))
}

/// Bilinear upsampling of a grid scene by 2 or 4.
pub fn upsample_scene(scene: &Scene, factor: usize) -> Result<Scene> {
    upsample_scene_with(scene, factor, UpsampleKernel::Bilinear)
}

pub fn upsample_scene_with(scene: &Scene, factor: usize, kernel: UpsampleKernel) -> Result<Scene> {
    let (h, w) = check_factor(scene, factor)?;
    let (oh, ow) = (h * factor, w * factor);
    let src = &scene.params;
    let f = factor as f64;
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = match kernel {
                UpsampleKernel::Nearest => src[(i / factor) * w + j / factor],
                UpsampleKernel::Bilinear => {
                    let sy = ((i as f64 + 0.5) / f - 0.5).clamp(0.0, (h - 1) as f64);
                    let sx = ((j as f64 + 0.5) / f - 0.5).clamp(0.0, (w - 1) as f64);
                    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                    (1.0 - fy) * ((1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1])
                        + fy * ((1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1])
                }
            };
        }
    }
    Ok(Scene { params: out, shape: vec![oh, ow], stage: scene.stage.clone() })
}

/// Box-average downsampling by 2 or 4.
pub fn downsample_scene(scene: &Scene, factor: usize) -> Result<Scene> {
    let (h, w) = check_factor(scene, factor)?;
    if h % factor != 0 || w % factor != 0 {
        return param(format!("{h}x{w} grid is not divisible by {factor}"));
    }
    let (oh, ow) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; oh * ow];
    for i in 0..h {
        for j in 0..w {
            out[(i / factor) * ow + j / factor] += inv * scene.params[i * w + j];
        }
    }
    Ok(Scene { params: out, shape: vec![oh, ow], stage: scene.stage.clone() })
}

/// One stage of a plan. `config`'s window, aux mode and stage name are
/// replaced by the stage's own fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub window: StageWindow,
    pub generator: Generator,
    pub aux: AuxMode,
    /// View-prior scale `s` for benchmark priors; lower is sharper.
    pub prior_scale: Option<f64>,
    pub config: DistillConfig,
}

impl StageSpec {
    pub fn resolved_config(&self, seed: u64) -> DistillConfig {
        DistillConfig {
            method: crate::distill::Method::Apfo,
            window: self.window,
            aux: self.aux,
            stage: self.name.clone(),
            seed,
            ..self.config.clone()
        }
    }

    fn resolution(&self) -> usize {
        match self.generator {
            Generator::MultiView { height, .. } => height,
            g => g.param_dim(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: Vec<StageSpec>,
}

impl StagePlan {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return param("a stage plan needs at least one stage");
        }
        for s in &self.stages {
            s.window.validate()?;
            s.config.validate()?;
            if let Some(sc) = s.prior_scale {
                if !(sc > 0.0 && sc.is_finite()) {
                    return param(format!("stage '{}' prior scale must be positive", s.name));
                }
            }
        }
        for pair in self.stages.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if b.window.t_start > a.window.t_start {
                return param(format!("stage '{}' starts at a later t than '{}'", b.name, a.name));
            }
            if std::mem::discriminant(&a.generator) != std::mem::discriminant(&b.generator) {
                return param("all stages must use the same generator kind");
            }
            let (ra, rb) = (a.resolution(), b.resolution());
            match a.generator {
                Generator::MultiView { .. } => {
                    if !(rb == ra || rb == 2 * ra || rb == 4 * ra) {
                        return param(format!("resolution {ra} -> {rb}: stages may keep it or grow it by 2 or 4"));
                    }
                }
                _ if ra != rb => return param("non-grid generators cannot change resolution"),
                _ => {}
            }
        }
        Ok(())
    }

    /// The four preset windows on a `base`-pixel grid: nerf at `base`, then
    /// geometry, texture and refine at `2 base` with a sharper prior.
    ///
    /// Adapters are kept per pose, since one unconditioned adapter cannot
    /// represent view-specific residuals.
    pub fn preset(base: usize, config: &DistillConfig) -> Self {
        let mv = |r: usize| Generator::MultiView { height: r, width: r };
        let config = &DistillConfig { aux_pose_conditioning: true, ..config.clone() };
        let stage = |p: StagePreset, r: usize, aux: AuxMode, s: f64| StageSpec {
            name: p.name().to_string(),
            window: p.window(),
            generator: mv(r),
            aux,
            prior_scale: Some(s),
            config: config.clone(),
        };
        Self {
            stages: vec![
                stage(StagePreset::Nerf, base, AuxMode::Lora, 0.05),
                stage(StagePreset::Geometry, 2 * base, AuxMode::Ideal, 0.03),
                stage(StagePreset::Texture, 2 * base, AuxMode::Lora, 0.02),
                stage(StagePreset::Refine, 2 * base, AuxMode::Lora, 0.02),
            ],
        }
    }
}

/// Prior source for each stage.
pub enum PipelinePriors<'a> {
    /// The same source for every stage (resolution must not change).
    Fixed(PriorSource<'a>),
    /// The blob benchmark, rebuilt at each stage's resolution and prior scale.
    Benchmark { views: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineResult {
    pub scene: Scene,
    pub records: Vec<TrajectoryRecord>,
    /// Set when a stage failed; `records` then hold the stages run so far.
    pub failure: Option<String>,
}

impl PipelineResult {
    /// All stage records as one step-increasing trajectory.
    pub fn combined(&self) -> TrajectoryRecord {
        let mut all = TrajectoryRecord::default();
        for r in &self.records {
            all.extend_from(r.clone());
        }
        all
    }
}

/// Seed of stage `k`; stage 0 uses the run seed itself.
pub fn stage_seed(seed: u64, k: usize) -> u64 {
    if k == 0 {
        seed
    } else {
        crate::rng::derive_key(seed, &[0x57a6e, k as u64])
    }
}

fn carry(scene: Scene, gen: &Generator) -> Result<Scene> {
    let want = gen.scene_shape();
    if scene.shape == want {
        return Ok(scene);
    }
    match (scene.grid(), &want[..]) {
        (Some((h, _)), [nh, _]) if nh % h == 0 => upsample_scene(&scene, nh / h),
        _ => param(format!("cannot carry a {:?} scene into a {want:?} stage", scene.shape)),
    }
}

/// Runs the stages in order, carrying the scene forward.
pub fn run_pipeline(plan: &StagePlan, priors: &PipelinePriors<'_>, initial: Scene, seed: u64) -> Result<PipelineResult> {
    plan.validate()?;
    let mut scene = initial;
    let mut records = Vec::with_capacity(plan.stages.len());
    for (k, stage) in plan.stages.iter().enumerate() {
        let cfg = stage.resolved_config(stage_seed(seed, k));
        let outcome = carry(scene.clone(), &stage.generator).and_then(|start| match priors {
            PipelinePriors::Fixed(src) => run_distillation(start, &stage.generator, *src, &cfg),
            PipelinePriors::Benchmark { views, seed: bseed } => {
                let (h, w) = match stage.generator {
                    Generator::MultiView { height, width } => (height, width),
                    _ => return Err(Error::Unsupported("benchmark priors need the multi-view generator".into())),
                };
                let s = stage.prior_scale.unwrap_or(0.02);
                let b = standard_benchmark(h, w, *views, s, *bseed)?;
                run_distillation(start, &b.generator, PriorSource::PerView(&b.views), &cfg)
            }
        });
        match outcome {
            Ok(rec) => {
                let done = rec.is_completed();
                if let Some(s) = &rec.final_scene {
                    scene = s.clone();
                }
                records.push(rec);
                if !done {
                    return Ok(PipelineResult { scene, records, failure: Some(format!("stage '{}' aborted", stage.name)) });
                }
            }
            Err(e) => {
                return Ok(PipelineResult { scene, records, failure: Some(format!("stage '{}': {e}", stage.name)) });
            }
        }
    }
    Ok(PipelineResult { scene, records, failure: None })
}
