//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::checkpoint::{Checkpoint, CheckpointKind};
use super::config::{EvalKind, GeneratorKind, PriorKind, RunConfig, SampleMode};
use super::io;
use crate::denoiser::Denoiser;
use crate::distill::{run_distillation, DistillConfig, Method, PriorSource, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::generator::{blob_scene, standard_benchmark, Benchmark, CameraPose, Generator, Scene};
use crate::metrics::{mmd_rbf, retrieval_precision, scene_error, sliced_w2, trend_stats};
use crate::nn::{denoiser_relative_errors, median, train_prior_net, MlpConfig, MlpDenoiser};
use crate::pipeline::{run_pipeline, PipelinePriors, StagePlan, StageSpec};
use crate::prior::{separated_labels, two_component_2d, ConditionalPriorSet, GaussianMixturePrior, GuidedPrior};
use crate::rng::{derive_key, standard_normal_vec, stream};
use crate::sampler::{noise_inits, pf_ode_batch, pf_ode_sample, reverse_sde_sample, sdedit_translate, OdeRunConfig};

/// Collects files and summary values for one run directory.
pub struct Run {
    pub dir: PathBuf,
    pub summary: BTreeMap<String, String>,
}

impl Run {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), summary: BTreeMap::new() })
    }

    fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        std::fs::write(self.dir.join(name), bytes)?;
        Ok(())
    }

    fn note(&mut self, key: &str, value: impl ToString) {
        self.summary.insert(key.to_string(), value.to_string());
    }

    /// Writes `summary.txt` and echoes it to stdout.
    fn finish(&self) -> Result<()> {
        let text = io::summary_to_text(&self.summary);
        self.write("summary.txt", &text)?;
        print!("{text}");
        Ok(())
    }
}

/// Analytic prior material built from the config.
pub enum BuiltPrior {
    Set(ConditionalPriorSet),
    Bench(Benchmark),
}

pub fn analytic_gmm(cfg: &RunConfig) -> Result<GaussianMixturePrior> {
    let p = &cfg.prior;
    match p.kind {
        PriorKind::Gaussian => GaussianMixturePrior::gaussian(p.mean.clone(), p.scale()),
        PriorKind::Mixture2d => Ok(two_component_2d()),
        PriorKind::Mixture => GaussianMixturePrior::normalized(p.components.clone(), None),
        PriorKind::Labels => Ok(separated_labels(p.labels, p.dim, p.scale(), p.separation)?.unconditional().clone()),
        PriorKind::Benchmark => Err(Error::Config("this command needs a gaussian, mixture or labels prior".into())),
    }
}

pub fn build_prior(cfg: &RunConfig) -> Result<BuiltPrior> {
    let p = &cfg.prior;
    Ok(match p.kind {
        PriorKind::Benchmark => BuiltPrior::Bench(standard_benchmark(p.size, p.size, p.views, p.scale(), p.scene_seed)?),
        PriorKind::Labels => BuiltPrior::Set(separated_labels(p.labels, p.dim, p.scale(), p.separation)?),
        _ => BuiltPrior::Set(ConditionalPriorSet::unconditional_only(analytic_gmm(cfg)?)),
    })
}

pub fn resolve_generator(cfg: &RunConfig, prior: &BuiltPrior) -> Result<Generator> {
    Ok(match (prior, cfg.generator.kind) {
        (BuiltPrior::Bench(b), _) => b.generator,
        (BuiltPrior::Set(s), GeneratorKind::Particles) => Generator::Particles { count: cfg.generator.count, dim: s.dim() },
        (BuiltPrior::Set(s), _) => Generator::Identity { dim: s.dim() },
    })
}

pub fn poses_for(gen: &Generator) -> Vec<CameraPose> {
    match *gen {
        Generator::Identity { .. } => vec![CameraPose::Default],
        Generator::Particles { count, .. } => (0..count).map(|index| CameraPose::Particle { index }).collect(),
        Generator::MultiView { .. } => Vec::new(),
    }
}

pub fn initial_scene(cfg: &RunConfig, gen: &Generator, seed: u64) -> Scene {
    let mut s = Scene::zeros(gen.scene_shape());
    if cfg.generator.init_scale > 0.0 {
        let z = standard_normal_vec(&mut stream(seed, &[0x5ce]), s.len());
        s.params = z.iter().map(|v| v * cfg.generator.init_scale).collect();
    }
    s
}

fn load_denoiser(path: &Path) -> Result<MlpDenoiser> {
    let ck = Checkpoint::load(path)?.expect_kind(CheckpointKind::Denoiser)?;
    let mc: MlpConfig =
        serde_json::from_value(ck.meta).map_err(|e| Error::Format(format!("denoiser architecture: {e}")))?;
    let mut net = MlpDenoiser::new(mc, 0)?;
    net.set_params(ck.payload)?;
    Ok(net)
}

fn record_summary(run: &mut Run, rec: &TrajectoryRecord) -> Result<()> {
    run.note("rows", rec.rows.len());
    run.note("denoiser_evals", rec.total_denoiser_evals());
    let losses = rec.losses();
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        run.note("initial_loss", first);
        run.note("final_loss", last);
    }
    let finite: Vec<f64> = losses.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.len() >= 3 {
        let t = trend_stats(&finite)?;
        run.note("loss_spearman_rho", t.spearman_rho);
        run.note("loss_fraction_increasing", t.fraction_increasing);
    }
    run.note(
        "status",
        match &rec.status {
            crate::distill::RunStatus::Completed => "completed".to_string(),
            crate::distill::RunStatus::Aborted { step, reason } => format!("aborted at step {step}: {reason}"),
        },
    );
    Ok(())
}

fn write_record(run: &Run, cfg: &RunConfig, rec: &TrajectoryRecord) -> Result<()> {
    if cfg.emit.csv {
        run.write("trajectory.csv", rec.to_csv())?;
    }
    if cfg.emit.svg {
        let losses = rec.losses();
        let grads = rec.grad_norms();
        run.write("loss.svg", io::svg_line_chart("loss", &[("loss", &losses)], true))?;
        run.write("grad_norm.svg", io::svg_line_chart("gradient norm", &[("grad_norm", &grads)], true))?;
    }
    Ok(())
}

fn write_scene(run: &Run, cfg: &RunConfig, name: &str, scene: &Scene, gen: &Generator, poses: &[CameraPose]) -> Result<()> {
    if cfg.emit.checkpoints {
        let mut ck = Checkpoint::new(CheckpointKind::Scene, scene.shape.clone(), scene.params.clone());
        ck.config_hash = cfg.hash();
        ck.meta = serde_json::json!({ "stage": scene.stage });
        let digest = ck.save(&run.dir.join(format!("{name}.ckpt")))?;
        let _ = digest;
    }
    if cfg.emit.pgm {
        if let Some((h, w)) = scene.grid() {
            run.write(&format!("{name}.pgm"), io::to_pgm(&scene.params, h, w)?)?;
            for (k, c) in poses.iter().enumerate() {
                run.write(&format!("{name}_view{k}.pgm"), io::to_pgm(&gen.render(scene, c)?, h, w)?)?;
            }
        }
    }
    Ok(())
}

fn aborted(rec: &TrajectoryRecord) -> Result<()> {
    match &rec.status {
        crate::distill::RunStatus::Completed => Ok(()),
        crate::distill::RunStatus::Aborted { step, reason } => {
            Err(Error::Numerical { step: *step, detail: reason.clone() })
        }
    }
}

pub fn cmd_train_prior(cfg: &RunConfig) -> Result<()> {
    let seed = cfg.seed()?;
    let gmm = analytic_gmm(cfg)?;
    let mut run = Run::new(&cfg.out)?;
    let tc = cfg.train.train_config(seed);
    let (net, log) = train_prior_net(&gmm, cfg.train.steps, &tc)?;
    let mut csv = String::from("step,loss\n");
    for (s, l) in &log.rows {
        csv.push_str(&format!("{s},{l}\n"));
    }
    run.write("train.csv", csv)?;

    let sigmas = cfg.train.eval_sigmas();
    let held = gmm.sample(&mut stream(seed, &[0xe7a1]), cfg.train.held_out)?;
    let errs = denoiser_relative_errors(&net, &gmm, &sigmas, &held, derive_key(seed, &[0xe7a2]))?;
    let per = held.len();
    let mut eval = String::from("sigma,median_relative_error\n");
    for (i, s) in sigmas.iter().enumerate() {
        eval.push_str(&format!("{s},{}\n", median(&errs[i * per..(i + 1) * per])));
    }
    let overall = median(&errs);
    eval.push_str(&format!("all,{overall}\n"));
    run.write("eval.csv", eval)?;

    let mut ck = Checkpoint::new(CheckpointKind::Denoiser, vec![net.num_params()], net.params().to_vec());
    ck.config_hash = cfg.hash();
    ck.rng_counter = cfg.train.steps as u64;
    ck.meta = serde_json::to_value(net.config()).expect("architecture serializes");
    let digest = ck.save(&run.dir.join("denoiser.ckpt"))?;
    run.note("median_relative_error", overall);
    run.note("final_train_loss", log.rows.last().map_or(f64::NAN, |r| r.1));
    run.note("checkpoint_sha256", digest);
    run.finish()
}

pub fn cmd_sample(cfg: &RunConfig) -> Result<()> {
    let seed = cfg.seed()?;
    let mut run = Run::new(&cfg.out)?;
    let prior = build_prior(cfg)?;
    let set = match &prior {
        BuiltPrior::Set(s) => s,
        BuiltPrior::Bench(_) => return Err(Error::Config("sampling needs a gaussian, mixture or labels prior".into())),
    };
    let net = cfg.prior.checkpoint.as_deref().map(load_denoiser).transpose()?;
    let guided = GuidedPrior::new(set, cfg.distill.label.as_deref(), cfg.distill.omega);
    let d: &dyn Denoiser = match &net {
        Some(n) => n,
        None => &guided,
    };
    let sched = &cfg.distill.schedule;
    let grid = if cfg.sample.steps == 0 {
        vec![sched.sigma_max]
    } else {
        crate::schedule::NoiseSchedule { n_steps: cfg.sample.steps, ..*sched }.sigma_grid_with_terminal()?
    };
    let ode = OdeRunConfig { seed, ..OdeRunConfig::new(grid, cfg.sample.solver) };
    let dim = d.dim();
    let n = cfg.sample.count;
    let inits = noise_inits(dim, sched.sigma_max, n, seed);
    let samples = match cfg.sample.mode {
        SampleMode::Ode => pf_ode_batch(d, &ode, &inits)?,
        SampleMode::Sde => (0..n)
            .into_par_iter()
            .map(|k| reverse_sde_sample(d, &ode, cfg.sample.churn, &mut stream(seed, &[0x5de, k as u64]), &inits[k]))
            .collect::<Result<Vec<_>>>()?,
        SampleMode::Sdedit => {
            let src = if cfg.sample.source.is_empty() { vec![0.0; dim] } else { cfg.sample.source.clone() };
            (0..n)
                .into_par_iter()
                .map(|k| sdedit_translate(d, sched, &src, cfg.sample.t_start, &ode, &mut stream(seed, &[0x5ed, k as u64])))
                .collect::<Result<Vec<_>>>()?
        }
    };
    if cfg.emit.csv {
        run.write("samples.csv", io::points_to_csv(&samples))?;
    }
    if cfg.sample.trajectory && cfg.sample.mode == SampleMode::Ode {
        let traj = pf_ode_sample(d, &ode, &inits[0])?;
        if cfg.emit.csv {
            run.write("trajectory.csv", io::points_to_csv(&traj))?;
        }
        if cfg.emit.svg {
            let cols: Vec<Vec<f64>> = (0..dim).map(|j| traj.iter().map(|x| x[j]).collect()).collect();
            let names: Vec<String> = (0..dim).map(|j| format!("x{j}")).collect();
            let series: Vec<(&str, &[f64])> = names.iter().map(String::as_str).zip(cols.iter().map(Vec::as_slice)).collect();
            run.write("trajectory.svg", io::svg_line_chart("PF-ODE trajectory", &series, false))?;
        }
    }
    run.note("samples", samples.len());
    run.note("grid_points", ode.grid.len());
    if net.is_none() && cfg.sample.mode != SampleMode::Sdedit && cfg.distill.label.is_none() {
        let direct = set.unconditional().sample(&mut stream(seed, &[0xd1ec7]), n)?;
        run.note("sliced_w2", sliced_w2(&samples, &direct, cfg.sample.n_proj, seed)?);
    }
    run.finish()
}

/// Matched-budget update count: `N * l` of the configured window.
pub fn apfo_budget(dc: &DistillConfig) -> Result<usize> {
    Ok((dc.schedule.window_indices(&dc.window)?.len() - 1) * dc.window.views_per_step)
}

fn distill_once(cfg: &RunConfig, dc: &DistillConfig, prior: &BuiltPrior) -> Result<(TrajectoryRecord, Generator, Vec<CameraPose>)> {
    let gen = resolve_generator(cfg, prior)?;
    let scene = initial_scene(cfg, &gen, dc.seed);
    let (rec, poses) = match prior {
        BuiltPrior::Bench(b) => (run_distillation(scene, &gen, PriorSource::PerView(&b.views), dc)?, b.views.poses.clone()),
        BuiltPrior::Set(set) => {
            let poses = poses_for(&gen);
            (run_distillation(scene, &gen, PriorSource::Shared { set, poses: &poses }, dc)?, poses)
        }
    };
    Ok((rec, gen, poses))
}

pub fn cmd_distill(cfg: &RunConfig) -> Result<()> {
    let seed = cfg.seed()?;
    let mut run = Run::new(&cfg.out)?;
    let prior = build_prior(cfg)?;
    let dc = DistillConfig { seed, ..cfg.distill.clone() };
    let (rec, gen, poses) = distill_once(cfg, &dc, &prior)?;
    write_record(&run, cfg, &rec)?;
    record_summary(&mut run, &rec)?;
    run.note("method", dc.method);
    if let Some(scene) = &rec.final_scene {
        write_scene(&run, cfg, "scene", scene, &gen, &poses)?;
        if let BuiltPrior::Bench(b) = &prior {
            let e = scene_error(&scene.params, &b.theta_star.params)?;
            run.note("relative_error", e.relative_l2);
            run.note("psnr_db", e.psnr_db);
        }
    }
    run.finish()?;
    aborted(&rec)
}

pub fn cmd_pipeline(cfg: &RunConfig) -> Result<()> {
    let seed = cfg.seed()?;
    let mut run = Run::new(&cfg.out)?;
    let p = &cfg.prior;
    let built = build_prior(cfg)?;
    let gen = resolve_generator(cfg, &built)?;
    let (plan, initial) = if cfg.pipeline.preset {
        if p.kind != PriorKind::Benchmark {
            return Err(Error::Config("the preset plan needs the benchmark prior".into()));
        }
        let plan = StagePlan::preset(cfg.pipeline.base_size, &cfg.distill);
        let first = plan.stages[0].generator;
        (plan, initial_scene(cfg, &first, seed))
    } else {
        let stage = StageSpec {
            name: cfg.distill.stage.clone(),
            window: cfg.distill.window,
            generator: gen,
            aux: cfg.distill.aux,
            prior_scale: Some(p.scale()),
            config: cfg.distill.clone(),
        };
        (StagePlan { stages: vec![stage] }, initial_scene(cfg, &gen, seed))
    };
    let poses_owned = poses_for(&gen);
    let priors = match &built {
        BuiltPrior::Bench(_) => PipelinePriors::Benchmark { views: p.views, seed: p.scene_seed },
        BuiltPrior::Set(set) => PipelinePriors::Fixed(PriorSource::Shared { set, poses: &poses_owned }),
    };
    let result = run_pipeline(&plan, &priors, initial, seed)?;
    let combined = result.combined();
    write_record(&run, cfg, &combined)?;
    record_summary(&mut run, &combined)?;
    for (k, rec) in result.records.iter().enumerate() {
        if let Some(s) = &rec.final_scene {
            let g = plan.stages[k].generator;
            let poses = match g {
                Generator::MultiView { .. } => CameraPose::uniform_azimuth(p.views),
                _ => poses_for(&g),
            };
            write_scene(&run, cfg, &format!("scene_{}", plan.stages[k].name), s, &g, &poses)?;
        }
    }
    run.note("stages", result.records.len());
    if let (BuiltPrior::Bench(_), Some((h, w))) = (&built, result.scene.grid()) {
        let star = blob_scene(h, w, p.scene_seed)?;
        let e = scene_error(&result.scene.params, &star.params)?;
        run.note("relative_error", e.relative_l2);
        run.note("psnr_db", e.psnr_db);
    }
    if let Some(f) = &result.failure {
        run.note("failure", f);
    }
    run.finish()?;
    match result.failure {
        Some(f) => Err(Error::Numerical { step: combined.rows.len(), detail: f }),
        None => Ok(()),
    }
}

/// One method/seed cell of a comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub method: Method,
    pub seed: u64,
    pub spearman_rho: f64,
    pub fraction_increasing: f64,
    pub denoiser_evals: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub relative_error: f64,
    pub losses: Vec<f64>,
}

/// Mean loss over the first (or last) `width` rows, i.e. one APFO timestep.
pub fn endpoint_loss(losses: &[f64], width: usize, tail: bool) -> f64 {
    let w = width.clamp(1, losses.len().max(1));
    let part = if tail { &losses[losses.len() - w..] } else { &losses[..w] };
    part.iter().sum::<f64>() / w as f64
}

pub fn compare_runs(cfg: &RunConfig) -> Result<Vec<CompareRow>> {
    let seed = cfg.seed()?;
    let prior = build_prior(cfg)?;
    let budget = apfo_budget(&cfg.distill)?;
    let mut rows = Vec::new();
    for k in 0..cfg.compare.seeds as u64 {
        for &method in &cfg.compare.methods {
            let mut dc = DistillConfig { method, seed: seed + k, total_steps: budget, ..cfg.distill.clone() };
            if matches!(method, Method::Vsd | Method::VsdAnnealed) {
                dc.aux = cfg.compare.vsd_aux;
            }
            let (rec, _, _) = distill_once(cfg, &dc, &prior)?;
            aborted(&rec)?;
            let losses = rec.losses();
            let t = trend_stats(&losses)?;
            let relative_error = match (&prior, &rec.final_scene) {
                (BuiltPrior::Bench(b), Some(s)) => scene_error(&s.params, &b.theta_star.params)?.relative_l2,
                _ => f64::NAN,
            };
            rows.push(CompareRow {
                method,
                seed: seed + k,
                spearman_rho: t.spearman_rho,
                fraction_increasing: t.fraction_increasing,
                denoiser_evals: rec.total_denoiser_evals(),
                initial_loss: endpoint_loss(&losses, dc.window.views_per_step, false),
                final_loss: endpoint_loss(&losses, dc.window.views_per_step, true),
                relative_error,
                losses,
            });
        }
    }
    Ok(rows)
}

pub const COMPARE_HEADER: &str =
    "method,seed,spearman_rho,fraction_increasing,denoiser_evals,initial_loss,final_loss,relative_error";

pub fn cmd_compare(cfg: &RunConfig) -> Result<()> {
    let mut run = Run::new(&cfg.out)?;
    let rows = compare_runs(cfg)?;
    let mut csv = format!("{COMPARE_HEADER}\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.method, r.seed, r.spearman_rho, r.fraction_increasing, r.denoiser_evals, r.initial_loss, r.final_loss, r.relative_error
        ));
    }
    if cfg.emit.csv {
        run.write("compare.csv", csv)?;
    }
    let mut medians = Vec::new();
    for &m in &cfg.compare.methods {
        let rhos: Vec<f64> = rows.iter().filter(|r| r.method == m).map(|r| r.spearman_rho).collect();
        let med = median(&rhos);
        medians.push((m, med));
        run.note(&format!("median_rho_{m}"), med);
        let evals: usize = rows.iter().filter(|r| r.method == m).map(|r| r.denoiser_evals).sum();
        run.note(&format!("denoiser_evals_{m}"), evals);
    }
    let med_of = |m: Method| medians.iter().find(|e| e.0 == m).map(|e| e.1);
    if let (Some(a), Some(v)) = (med_of(Method::Apfo), med_of(Method::Vsd)) {
        run.note("rho_gap_vsd_minus_apfo", v - a);
    }
    if cfg.emit.svg {
        let first = rows.first().map_or(0, |r| r.seed);
        let names: Vec<String> = cfg.compare.methods.iter().map(|m| m.to_string()).collect();
        let series: Vec<(&str, &[f64])> = rows
            .iter()
            .filter(|r| r.seed == first)
            .zip(&names)
            .map(|(r, n)| (n.as_str(), r.losses.as_slice()))
            .collect();
        run.write("compare.svg", io::svg_line_chart("loss by method", &series, true))?;
    }
    run.finish()
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let seed = cfg.seed()?;
    let mut run = Run::new(&cfg.out)?;
    let input = || cfg.eval.input.clone().ok_or_else(|| Error::Config("eval.input is required for this kind".into()));
    match cfg.eval.kind {
        EvalKind::Scene => {
            let ck = Checkpoint::load(&input()?)?.expect_kind(CheckpointKind::Scene)?;
            let (h, w) = match ck.shape[..] {
                [h, w] => (h, w),
                _ => return Err(Error::Format("scene checkpoint is not a grid".into())),
            };
            let star = blob_scene(h, w, cfg.prior.scene_seed)?;
            let e = scene_error(&ck.payload, &star.params)?;
            run.note("relative_error", e.relative_l2);
            run.note("psnr_db", e.psnr_db);
        }
        EvalKind::Samples => {
            let pts = io::points_from_csv(&std::fs::read_to_string(input()?)?)?;
            let gmm = analytic_gmm(cfg)?;
            let direct = gmm.sample(&mut stream(seed, &[0xd1ec7]), pts.len())?;
            run.note("sliced_w2", sliced_w2(&pts, &direct, cfg.eval.n_proj, seed)?);
            run.note("mmd_rbf", mmd_rbf(&pts, &direct, cfg.eval.mmd_bandwidth)?);
            run.note("samples", pts.len());
        }
        EvalKind::Retrieval => {
            let precision = retrieval_run(cfg, seed)?;
            run.note("retrieval_precision", precision);
        }
    }
    run.finish()
}

/// APFO-optimizes `scenes_per_label` scenes per label, then classifies them.
pub fn retrieval_run(cfg: &RunConfig, seed: u64) -> Result<f64> {
    let p = &cfg.prior;
    if p.kind != PriorKind::Labels {
        return Err(Error::Config("retrieval needs the labels prior".into()));
    }
    let set = separated_labels(p.labels, p.dim, p.scale(), p.separation)?;
    let gen = Generator::Identity { dim: set.dim() };
    let poses = [CameraPose::Default];
    let labels: Vec<String> = set.labels().map(str::to_string).collect();
    let jobs: Vec<(usize, usize)> = (0..labels.len()).flat_map(|l| (0..cfg.eval.scenes_per_label).map(move |r| (l, r))).collect();
    let scenes = jobs
        .par_iter()
        .map(|&(l, r)| {
            let s = derive_key(seed, &[0x7e7, l as u64, r as u64]);
            let dc = DistillConfig { method: Method::Apfo, label: Some(labels[l].clone()), seed: s, ..cfg.distill.clone() };
            let rec = run_distillation(initial_scene(cfg, &gen, s), &gen, PriorSource::Shared { set: &set, poses: &poses }, &dc)?;
            aborted(&rec)?;
            Ok((labels[l].clone(), rec.final_scene.expect("completed run has a scene")))
        })
        .collect::<Result<Vec<_>>>()?;
    retrieval_precision(&scenes, &set, &gen, &poses)
}
