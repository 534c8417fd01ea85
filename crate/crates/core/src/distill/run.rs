//! The optimization loops.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use super::aux::AuxState;
use super::grads::{apfo_target, regression_loss, sds_grad, vsd_grad, ApfoTarget, DistillGrad};
use super::record::{RunStatus, TrajectoryRecord, TrajectoryRow};
use super::{DistillConfig, Method, OptimizerConfig};
use crate::denoiser::Denoiser;
use crate::error::{check_dim, Error, Result};
use crate::generator::{CameraPose, Generator, Scene, ViewPriorSet};
use crate::linalg::{all_finite, norm};
use crate::nn::Adam;
use crate::prior::{ConditionalPriorSet, GaussianMixturePrior, GuidedPrior};
use crate::rng::stream;

/// Where `D_p` comes from, and which poses may be rendered.
#[derive(Clone, Copy)]
pub enum PriorSource<'a> {
    /// One prior set for every pose; guidance comes from the config.
    Shared { set: &'a ConditionalPriorSet, poses: &'a [CameraPose] },
    /// One analytic prior per pose (recoverable benchmarks).
    PerView(&'a ViewPriorSet),
    /// Any denoiser, e.g. a trained network, shared by every pose.
    Model { denoiser: &'a dyn Denoiser, poses: &'a [CameraPose] },
}

impl<'a> PriorSource<'a> {
    pub fn poses(&self) -> &'a [CameraPose] {
        match self {
            Self::Shared { poses, .. } | Self::Model { poses, .. } => poses,
            Self::PerView(v) => &v.poses,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Shared { set, .. } => set.dim(),
            Self::PerView(v) => v.priors[0].dim(),
            Self::Model { denoiser, .. } => denoiser.dim(),
        }
    }

    /// `D_p^omega` for the pose with index `view`.
    pub fn view_prior(&self, view: usize, label: Option<&'a str>, omega: f64) -> ViewPrior<'a> {
        match *self {
            Self::Shared { set, .. } => ViewPrior::Guided(GuidedPrior::new(set, label, omega)),
            Self::PerView(v) => ViewPrior::Analytic(&v.priors[view]),
            Self::Model { denoiser, .. } => ViewPrior::Model(denoiser),
        }
    }
}

pub enum ViewPrior<'a> {
    Guided(GuidedPrior<'a>),
    Analytic(&'a GaussianMixturePrior),
    Model(&'a dyn Denoiser),
}

impl Denoiser for ViewPrior<'_> {
    fn dim(&self) -> usize {
        match self {
            Self::Guided(g) => g.dim(),
            Self::Analytic(p) => p.dim(),
            Self::Model(d) => d.dim(),
        }
    }

    fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        match self {
            Self::Guided(g) => g.denoise(x, sigma),
            Self::Analytic(p) => p.denoise(x, sigma),
            Self::Model(d) => d.denoise(x, sigma),
        }
    }
}

/// Parameter optimizer for `theta`.
#[derive(Debug, Clone)]
pub enum ParamOptimizer {
    Adam(Adam),
    Sgd(f64),
}

impl ParamOptimizer {
    pub fn new(cfg: OptimizerConfig, n_params: usize) -> Self {
        match cfg {
            OptimizerConfig::Adam(a) => Self::Adam(Adam::new(a, n_params)),
            OptimizerConfig::Sgd { lr } => Self::Sgd(lr),
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        match self {
            Self::Adam(a) => a.step(params, grads),
            Self::Sgd(lr) => crate::linalg::axpy(-*lr, grads, params),
        }
    }
}

/// One run's mutable state. Drives either loop; also usable step by step.
pub struct Distiller<'a> {
    pub generator: &'a Generator,
    pub priors: PriorSource<'a>,
    pub cfg: &'a DistillConfig,
    pub scene: Scene,
    pub optimizer: ParamOptimizer,
    pub aux: AuxState,
    pub record: TrajectoryRecord,
    started: Instant,
}

impl<'a> Distiller<'a> {
    pub fn new(scene: Scene, generator: &'a Generator, priors: PriorSource<'a>, cfg: &'a DistillConfig) -> Result<Self> {
        cfg.validate()?;
        check_dim(generator.param_dim(), scene.len(), "scene parameters")?;
        check_dim(generator.render_dim(), priors.dim(), "prior")?;
        if priors.poses().is_empty() {
            return crate::error::param("at least one camera pose is required");
        }
        for pose in priors.poses() {
            generator.view_map(pose)?;
        }
        match (&priors, &cfg.label) {
            (PriorSource::Shared { set, .. }, Some(label)) => {
                set.conditional(label)?;
            }
            (PriorSource::Shared { .. }, None) => {}
            (_, Some(_)) => return Err(Error::Unsupported("guidance needs a labeled prior set".into())),
            _ => {}
        }
        Ok(Self {
            generator,
            priors,
            cfg,
            optimizer: ParamOptimizer::new(cfg.optimizer, scene.len()),
            aux: AuxState::new(cfg, generator, priors.poses().len())?,
            scene,
            record: TrajectoryRecord::default(),
            started: Instant::now(),
        })
    }

    fn wall_ms(&self) -> u64 {
        if self.cfg.reproducible {
            0
        } else {
            self.started.elapsed().as_millis() as u64
        }
    }

    fn next_step(&self) -> usize {
        self.record.rows.len()
    }

    fn abort(&mut self, row: TrajectoryRow, reason: String) {
        let step = row.step;
        self.record.rows.push(row);
        self.record.status = RunStatus::Aborted { step, reason };
    }

    fn is_aborted(&self) -> bool {
        !self.record.is_completed()
    }

    /// Pose indices for scheduled timestep `i`: a seeded permutation, cycled
    /// when `views_per_step` exceeds the pose count.
    pub fn select_views(&self, i: usize) -> Vec<usize> {
        let n = self.priors.poses().len();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut stream(self.cfg.seed, &[0xa9, i as u64]));
        (0..self.cfg.window.views_per_step).map(|v| perm[v % n]).collect()
    }

    /// One scheduled APFO timestep `i -> i + 1` over the selected views.
    ///
    /// Each view updates `theta` in turn, so later views see earlier updates.
    /// Returns the regression targets that were fitted.
    pub fn apfo_update(&mut self, i: usize, t: f64, sigma: f64, sigma_next: f64) -> Result<Vec<ApfoTarget>> {
        let cfg = self.cfg;
        let mut fitted = Vec::with_capacity(cfg.window.views_per_step);
        for (v, view) in self.select_views(i).into_iter().enumerate() {
            if self.is_aborted() {
                break;
            }
            let pose = self.priors.poses()[view];
            let prior = self.priors.view_prior(view, cfg.label.as_deref(), cfg.omega);
            let mut rng = stream(cfg.seed, &[0xa5, i as u64, v as u64]);
            let target = {
                let aux = self.aux.instance(self.generator, &self.scene, view, &prior)?;
                apfo_target(self.generator, &self.scene, &pose, sigma, sigma_next, &prior, aux.rule(), &mut rng)
            };
            let mut row = TrajectoryRow {
                step: self.next_step(),
                stage: cfg.stage.clone(),
                t,
                sigma,
                view,
                loss: f64::NAN,
                grad_norm: f64::NAN,
                denoiser_evals: cfg.evals_per_update(),
                wall_ms: 0,
            };
            let target = match target {
                Ok(tg) if tg.loss.is_finite() && tg.grad_norm.is_finite() => tg,
                Ok(_) => {
                    row.wall_ms = self.wall_ms();
                    self.abort(row, "non-finite APFO loss".into());
                    return Ok(fitted);
                }
                Err(Error::Numerical { detail, .. }) => {
                    row.wall_ms = self.wall_ms();
                    self.abort(row, detail);
                    return Ok(fitted);
                }
                Err(e) => return Err(e),
            };
            row.loss = target.loss;
            row.grad_norm = target.grad_norm;
            for _ in 0..cfg.inner_steps {
                let (_, g) = regression_loss(self.generator, &self.scene, &pose, &target.target)?;
                self.optimizer.step(&mut self.scene.params, &g);
            }
            if !all_finite(&self.scene.params) {
                row.wall_ms = self.wall_ms();
                self.abort(row, "non-finite scene parameters".into());
                return Ok(fitted);
            }
            if cfg.aux_training {
                let fresh = self.generator.render(&self.scene, &pose)?;
                let mut arng = stream(cfg.seed, &[0xa7, i as u64, v as u64]);
                row.denoiser_evals += self.aux.train(&fresh, view, &prior, cfg, &mut arng)?;
            }
            row.wall_ms = self.wall_ms();
            self.record.rows.push(row);
            fitted.push(target);
        }
        Ok(fitted)
    }

    /// `(t_i, sigma_i)` over the configured window.
    pub fn window_schedule(&self) -> Result<Vec<(f64, f64)>> {
        let s = &self.cfg.schedule;
        s.window_indices(&self.cfg.window)?
            .into_iter()
            .map(|k| {
                let t = s.t_of_index(k);
                Ok((t, s.sigma_of_t(t)?))
            })
            .collect()
    }

    pub fn run_apfo(&mut self) -> Result<()> {
        let grid = self.window_schedule()?;
        if grid.len() < 2 {
            return Err(Error::Schedule("APFO window needs at least two noise levels".into()));
        }
        for (i, w) in grid.windows(2).enumerate() {
            self.apfo_update(i, w[0].0, w[0].1, w[1].1)?;
            if self.is_aborted() {
                break;
            }
        }
        Ok(())
    }

    fn draw_t(&self, s: usize, rng: &mut impl Rng) -> f64 {
        let (lo, hi) = self.cfg.t_range;
        match self.cfg.method {
            Method::VsdAnnealed => {
                let denom = self.cfg.total_steps.saturating_sub(1).max(1) as f64;
                hi - (hi - lo) * s as f64 / denom
            }
            _ if lo == hi => lo,
            _ => rng.random_range(lo..=hi),
        }
    }

    /// One SDS or VSD update at random `t` and pose.
    pub fn score_update(&mut self, s: usize) -> Result<()> {
        let cfg = self.cfg;
        let mut rng = stream(cfg.seed, &[0x5d, s as u64]);
        let t = self.draw_t(s, &mut rng);
        let view = rng.random_range(0..self.priors.poses().len());
        let pose = self.priors.poses()[view];
        let prior = self.priors.view_prior(view, cfg.label.as_deref(), cfg.omega);
        let mut nrng = stream(cfg.seed, &[0x5e, s as u64]);
        let result: Result<DistillGrad> = match cfg.method {
            Method::Sds => sds_grad(self.generator, &self.scene, &pose, t, &prior, &mut nrng, cfg),
            _ => {
                let aux = self.aux.instance(self.generator, &self.scene, view, &prior)?;
                vsd_grad(self.generator, &self.scene, &pose, t, &prior, aux.rule(), &mut nrng, cfg)
            }
        };
        let mut row = TrajectoryRow {
            step: self.next_step(),
            stage: cfg.stage.clone(),
            t,
            sigma: cfg.schedule.sigma_of_t(t)?,
            view,
            loss: f64::NAN,
            grad_norm: f64::NAN,
            denoiser_evals: cfg.evals_per_update(),
            wall_ms: 0,
        };
        let g = match result {
            Ok(g) if g.loss.is_finite() && all_finite(&g.grad) => g,
            Ok(_) => {
                row.wall_ms = self.wall_ms();
                self.abort(row, "non-finite distillation loss".into());
                return Ok(());
            }
            Err(Error::Numerical { detail, .. }) => {
                row.wall_ms = self.wall_ms();
                self.abort(row, detail);
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        row.loss = g.loss;
        row.grad_norm = norm(&g.grad);
        self.optimizer.step(&mut self.scene.params, &g.grad);
        if cfg.method != Method::Sds && cfg.aux_training {
            let mut arng = stream(cfg.seed, &[0x5f, s as u64]);
            row.denoiser_evals += self.aux.train(&g.render, view, &prior, cfg, &mut arng)?;
        }
        row.wall_ms = self.wall_ms();
        self.record.rows.push(row);
        Ok(())
    }

    pub fn run_score(&mut self) -> Result<()> {
        for s in 0..self.cfg.total_steps {
            self.score_update(s)?;
            if self.is_aborted() {
                break;
            }
        }
        Ok(())
    }

    pub fn run(mut self) -> Result<TrajectoryRecord> {
        match self.cfg.method {
            Method::Apfo => self.run_apfo()?,
            _ => self.run_score()?,
        }
        let mut record = self.record;
        record.final_scene = Some(self.scene.with_stage(self.cfg.stage.clone()));
        Ok(record)
    }
}

/// Full optimization loop for the configured method.
///
/// A non-finite loss ends the run with a diagnostic row and an aborted
/// status rather than an error.
pub fn run_distillation(
    scene: Scene,
    generator: &Generator,
    priors: PriorSource<'_>,
    cfg: &DistillConfig,
) -> Result<TrajectoryRecord> {
    Distiller::new(scene, generator, priors, cfg)?.run()
}
