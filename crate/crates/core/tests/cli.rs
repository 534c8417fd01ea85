//! End-to-end runs of the `flowdistill` binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flowdistill::cli::checkpoint::{Checkpoint, CheckpointKind};
use flowdistill::cli::io;
use flowdistill::cli::RunConfig;
use flowdistill::distill::{TrajectoryRecord, CSV_HEADER};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_flowdistill"));
    c.env("FLOWDISTILL_THREADS", "2");
    c
}

fn write_cfg(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn run(sub: &str, cfg: &Path, out: &Path) -> Output {
    bin().args([sub, "--config"]).arg(cfg).arg("--out").arg(out).output().unwrap()
}

fn ok(o: &Output) {
    assert_eq!(o.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn summary(dir: &Path) -> BTreeMap<String, String> {
    io::summary_from_text(&std::fs::read_to_string(dir.join("summary.txt")).unwrap()).unwrap()
}

fn num(s: &BTreeMap<String, String>, key: &str) -> f64 {
    s.get(key).unwrap_or_else(|| panic!("missing {key}")).parse().unwrap()
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = bin().args(["distill", "--config"]).arg(tmp.path().join("nope.cfg")).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(bin().args(["frobnicate"]).output().unwrap().status.code(), Some(2));
    assert_eq!(bin().args(["distill"]).output().unwrap().status.code(), Some(2));
    assert_eq!(bin().args(["--help"]).output().unwrap().status.code(), Some(0));

    let unknown_method = write_cfg(tmp.path(), "m.cfg", "seed = 1\ndistill.method = frob\n");
    assert_eq!(run("distill", &unknown_method, tmp.path()).status.code(), Some(2));
    let no_seed = write_cfg(tmp.path(), "s.cfg", "prior.kind = gaussian\n");
    assert_eq!(run("distill", &no_seed, tmp.path()).status.code(), Some(2));
    let unknown_key = write_cfg(tmp.path(), "k.cfg", "seed = 1\ndistill.colour = red\n");
    assert_eq!(run("distill", &unknown_key, tmp.path()).status.code(), Some(2));
}

#[test]
fn print_config_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), "a.cfg", "seed = 4\n[distill]\nmethod = vsd\nomega = 7.5\n");
    let o = bin().args(["compare", "--print-config", "--config"]).arg(&cfg).args(["--seed", "9"]).output().unwrap();
    ok(&o);
    let text = String::from_utf8(o.stdout).unwrap();
    let parsed = RunConfig::parse(&text).unwrap();
    assert_eq!(parsed.seed, Some(9));
    assert_eq!(parsed.distill.omega, 7.5);
    assert_eq!(parsed.to_flat(), text);
    let json = RunConfig::parse(&parsed.to_json()).unwrap();
    assert_eq!(json, parsed);
}

#[test]
fn train_prior_is_accurate_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), "t.cfg", "seed = 2\nprior.kind = gaussian\nprior.mean = [1.0]\nprior.scale = 0.5\n");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&run("train-prior", &cfg, &a));
    ok(&run("train-prior", &cfg, &b));
    let (sa, sb) = (summary(&a), summary(&b));
    assert_eq!(sa["checkpoint_sha256"], sb["checkpoint_sha256"]);
    assert_eq!(std::fs::read(a.join("denoiser.ckpt")).unwrap(), std::fs::read(b.join("denoiser.ckpt")).unwrap());
    let eval = read(a.join("eval.csv"));
    let last = eval.lines().last().unwrap();
    let err: f64 = last.split(',').nth(1).unwrap().parse().unwrap();
    assert!(last.starts_with("all,") && err <= 0.05, "{last}");
    let ck = Checkpoint::load(&a.join("denoiser.ckpt")).unwrap().expect_kind(CheckpointKind::Denoiser).unwrap();
    assert_eq!(ck.config_hash, RunConfig::load(&cfg).unwrap().hash());

    // the checkpoint drives the sampler
    let s = write_cfg(
        tmp.path(),
        "s.cfg",
        &format!("seed = 2\nprior.checkpoint = \"{}\"\nsample.count = 64\nsample.steps = 20\n", a.join("denoiser.ckpt").display()),
    );
    ok(&run("sample", &s, &tmp.path().join("s")));
    assert_eq!(io::points_from_csv(&read(tmp.path().join("s/samples.csv"))).unwrap().len(), 64);
}

#[test]
fn sample_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), "g.cfg", "seed = 3\nprior.kind = mixture2d\nsample.steps = 200\n");
    let out = tmp.path().join("o");
    ok(&run("sample", &cfg, &out));
    let s = summary(&out);
    assert_eq!(num(&s, "grid_points"), 201.0);
    assert!(num(&s, "sliced_w2") <= 0.05, "{}", s["sliced_w2"]);
    let pts = io::points_from_csv(&read(out.join("samples.csv"))).unwrap();
    assert_eq!(pts.len(), 4096);
    let traj = io::points_from_csv(&read(out.join("trajectory.csv"))).unwrap();
    assert_eq!(traj.len(), 201);
    let series = io::svg_series(&read(out.join("trajectory.svg"))).unwrap();
    assert_eq!(series, vec![("x0".to_string(), 201), ("x1".to_string(), 201)]);

    // a single-level grid echoes the initial noise
    let echo = write_cfg(tmp.path(), "e.cfg", "seed = 3\nprior.kind = mixture2d\nsample.steps = 0\nsample.count = 8\n");
    let eo = tmp.path().join("e");
    ok(&run("sample", &echo, &eo));
    let pts = io::points_from_csv(&read(eo.join("samples.csv"))).unwrap();
    assert_eq!(pts, flowdistill::sampler::noise_inits(2, 80.0, 8, 3));

    for mode in ["sde", "sdedit"] {
        let c = write_cfg(tmp.path(), "m.cfg", &format!("seed = 3\nprior.kind = mixture2d\nsample.mode = {mode}\nsample.count = 32\n"));
        ok(&run("sample", &c, &tmp.path().join(mode)));
    }
}

const IDENTITY_RUN: &str = "seed = 5\nprior.kind = gaussian\nprior.mean = [1.0, -1.0]\nprior.scale = 0.5\ndistill.aux = ideal\n";

#[test]
fn distill_rows_files_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), "d.cfg", IDENTITY_RUN);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&run("distill", &cfg, &a));
    ok(&run("distill", &cfg, &b));
    let csv = read(a.join("trajectory.csv"));
    assert_eq!(csv, read(b.join("trajectory.csv")));
    assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
    let rec = TrajectoryRecord::from_csv(&csv).unwrap();
    // nerf window: 640 updates of 5 views, 2 evaluations each
    assert_eq!(rec.rows.len(), 640 * 5);
    assert_eq!(rec.total_denoiser_evals(), 640 * 5 * 2);
    assert_eq!(io::svg_series(&read(a.join("loss.svg"))).unwrap(), vec![("loss".to_string(), 3200)]);
    assert_eq!(io::svg_series(&read(a.join("grad_norm.svg"))).unwrap(), vec![("grad_norm".to_string(), 3200)]);
    let ck = Checkpoint::load(&a.join("scene.ckpt")).unwrap().expect_kind(CheckpointKind::Scene).unwrap();
    assert_eq!(ck.shape, vec![2]);
    assert_eq!(num(&summary(&a), "rows"), 3200.0);
}

#[test]
fn distill_matches_golden_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        tmp.path(),
        "d.cfg",
        &format!("{IDENTITY_RUN}distill.window.t_start = 0.5\ndistill.window.t_end = 0.45\ndistill.window.views_per_step = 2\n"),
    );
    ok(&run("distill", &cfg, tmp.path()));
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/distill_identity.csv");
    assert_eq!(read(tmp.path().join("trajectory.csv")), read(golden));
}

#[test]
fn diverging_run_exits_one_with_diagnostic_row() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        tmp.path(),
        "d.cfg",
        &format!("{IDENTITY_RUN}distill.optimizer.kind = sgd\ndistill.optimizer.lr = 1e300\ndistill.inner_steps = 4\n"),
    );
    let o = run("distill", &cfg, tmp.path());
    assert_eq!(o.status.code(), Some(1), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    // the update that overflowed is the last recorded row
    let rec = TrajectoryRecord::from_csv(&read(tmp.path().join("trajectory.csv"))).unwrap();
    assert_eq!(rec.rows.len(), 1);
    assert!(summary(tmp.path())["status"].starts_with("aborted at step 0"));
}

#[test]
fn benchmark_distill_recovers_the_scene() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), "b.cfg", "seed = 1\nprior.kind = benchmark\n");
    ok(&run("distill", &cfg, tmp.path()));
    let s = summary(tmp.path());
    assert!(num(&s, "relative_error") <= 0.03, "{}", s["relative_error"]);
    let (h, w, px) = io::from_pgm(&std::fs::read(tmp.path().join("scene_view3.pgm")).unwrap()).unwrap();
    assert_eq!((h, w, px.len()), (32, 32, 1024));

    let e = write_cfg(
        tmp.path(),
        "e.cfg",
        &format!("seed = 1\neval.kind = scene\neval.input = \"{}\"\n", tmp.path().join("scene.ckpt").display()),
    );
    let eo = tmp.path().join("eval");
    ok(&run("eval", &e, &eo));
    assert_eq!(summary(&eo)["relative_error"], s["relative_error"]);
}

#[test]
fn single_stage_pipeline_equals_distill() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), "p.cfg", &format!("{IDENTITY_RUN}pipeline.preset = false\ndistill.stage = nerf\n"));
    let (p, d) = (tmp.path().join("p"), tmp.path().join("d"));
    ok(&run("pipeline", &cfg, &p));
    ok(&run("distill", &cfg, &d));
    assert_eq!(read(p.join("trajectory.csv")), read(d.join("trajectory.csv")));
    assert_eq!(std::fs::read(p.join("scene_nerf.ckpt")).unwrap(), std::fs::read(d.join("scene.ckpt")).unwrap());
}

#[test]
fn preset_pipeline_runs_windows_in_order() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), "p.cfg", "seed = 1\nprior.kind = benchmark\n");
    ok(&run("pipeline", &cfg, tmp.path()));
    let rec = TrajectoryRecord::from_csv(&read(tmp.path().join("trajectory.csv"))).unwrap();
    let mut stages: Vec<&str> = rec.rows.iter().map(|r| r.stage.as_str()).collect();
    stages.dedup();
    assert_eq!(stages, ["nerf", "geometry", "texture", "refine"]);
    assert!(rec.rows.windows(2).all(|w| w[1].step == w[0].step + 1));
    let first_t = |name: &str| rec.rows.iter().find(|r| r.stage == name).unwrap().t;
    assert_eq!(first_t("nerf"), 1.0);
    assert_eq!(first_t("geometry"), 0.8);
    assert_eq!(first_t("texture"), 0.5);
    assert_eq!(first_t("refine"), 0.3);
    for name in ["nerf", "geometry", "texture", "refine"] {
        assert!(tmp.path().join(format!("scene_{name}.ckpt")).exists());
    }
    assert!(num(&summary(tmp.path()), "relative_error") <= 0.03);
}

#[test]
fn compare_identical_methods_give_identical_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        tmp.path(),
        "c.cfg",
        &format!("{IDENTITY_RUN}compare.methods = [\"apfo\", \"apfo\"]\ncompare.seeds = 2\ndistill.window.t_end = 0.8\n"),
    );
    ok(&run("compare", &cfg, tmp.path()));
    let csv = read(tmp.path().join("compare.csv"));
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0], rows[1]);
    assert_eq!(rows[2], rows[3]);
    assert_ne!(rows[0], rows[2]);
    assert_eq!(io::svg_series(&read(tmp.path().join("compare.svg"))).unwrap().len(), 2);
}

#[test]
fn compare_reports_all_methods_with_matched_budget() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), "c.cfg", &format!("{IDENTITY_RUN}compare.seeds = 1\ncompare.vsd_aux = ideal\n"));
    ok(&run("compare", &cfg, tmp.path()));
    let s = summary(tmp.path());
    for m in ["sds", "vsd", "vsd_annealed", "apfo"] {
        assert!(s.contains_key(&format!("median_rho_{m}")), "{m}");
    }
    // one prior evaluation per SDS update, two per APFO and VSD update
    assert_eq!(num(&s, "denoiser_evals_sds"), 3200.0);
    assert_eq!(num(&s, "denoiser_evals_apfo"), 6400.0);
    assert_eq!(num(&s, "denoiser_evals_vsd"), 6400.0);
    assert!(s.contains_key("rho_gap_vsd_minus_apfo"));
}

#[test]
fn eval_retrieval_and_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), "r.cfg", "seed = 1\nprior.kind = labels\neval.kind = retrieval\neval.scenes_per_label = 2\n");
    let r = tmp.path().join("r");
    ok(&run("eval", &cfg, &r));
    assert!(num(&summary(&r), "retrieval_precision") >= 0.9);

    let g = write_cfg(tmp.path(), "g.cfg", "seed = 7\nprior.kind = mixture2d\nsample.count = 1024\n");
    let s = tmp.path().join("s");
    ok(&run("sample", &g, &s));
    let e = write_cfg(
        tmp.path(),
        "e.cfg",
        &format!("seed = 8\nprior.kind = mixture2d\neval.kind = samples\neval.input = \"{}\"\n", s.join("samples.csv").display()),
    );
    let eo = tmp.path().join("e");
    ok(&run("eval", &e, &eo));
    let sum = summary(&eo);
    assert_eq!(num(&sum, "samples"), 1024.0);
    assert!(num(&sum, "sliced_w2") < 0.1);
    assert!(num(&sum, "mmd_rbf").abs() < 0.01);
}

#[test]
fn thread_cap_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), "g.cfg", "seed = 3\nprior.kind = mixture2d\nsample.count = 256\nsample.steps = 30\n");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let o = bin().env("FLOWDISTILL_THREADS", "1").args(["sample", "--config"]).arg(&cfg).arg("--out").arg(&a).output().unwrap();
    ok(&o);
    let o = bin().env("FLOWDISTILL_THREADS", "4").args(["sample", "--config"]).arg(&cfg).arg("--out").arg(&b).output().unwrap();
    ok(&o);
    assert_eq!(read(a.join("samples.csv")), read(b.join("samples.csv")));
    let bad = bin().env("FLOWDISTILL_THREADS", "zero").args(["sample", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}
