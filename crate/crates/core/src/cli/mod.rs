//! Command-line front end.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod io;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::Error;
pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "flowdistill", version, about = "Diffusion-prior optimization lab: SDS, VSD and APFO")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum CommandKind {
    TrainPrior,
    Sample,
    Distill,
    Pipeline,
    Compare,
    Eval,
}

#[derive(Debug, clap::Args)]
struct CommonArgs {
    /// Config file (flat `key = value` or JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a neural denoiser on samples of an analytic prior.
    TrainPrior(CommonArgs),
    /// Draw samples with the PF ODE, the reverse SDE or SDEdit.
    Sample(CommonArgs),
    /// Optimize a scene with SDS, VSD or APFO.
    Distill(CommonArgs),
    /// Run a coarse-to-fine stage plan.
    Pipeline(CommonArgs),
    /// Matched-budget comparison of methods over seeds.
    Compare(CommonArgs),
    /// Evaluate scenes, samples or label retrieval.
    Eval(CommonArgs),
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Caps rayon's pool from `FLOWDISTILL_THREADS` when set.
pub fn configure_threads() -> Result<(), Error> {
    if let Ok(v) = std::env::var("FLOWDISTILL_THREADS") {
        let n: usize = v.trim().parse().map_err(|_| Error::Config(format!("FLOWDISTILL_THREADS='{v}' is not a count")))?;
        if n == 0 {
            return Err(Error::Config("FLOWDISTILL_THREADS must be >= 1".into()));
        }
        // a pool built earlier in the same process keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let (kind, args) = match cli.command {
        Command::TrainPrior(a) => (CommandKind::TrainPrior, a),
        Command::Sample(a) => (CommandKind::Sample, a),
        Command::Distill(a) => (CommandKind::Distill, a),
        Command::Pipeline(a) => (CommandKind::Pipeline, a),
        Command::Compare(a) => (CommandKind::Compare, a),
        Command::Eval(a) => (CommandKind::Eval, a),
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return EXIT_USAGE;
    }
    let mut cfg = match (&args.config, args.print_config) {
        (Some(path), _) => match RunConfig::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_USAGE;
            }
        },
        (None, true) => RunConfig::default(),
        (None, false) => {
            eprintln!("error: --config <path> is required");
            return EXIT_USAGE;
        }
    };
    if let Some(s) = args.seed {
        cfg.seed = Some(s);
    }
    if let Some(o) = args.out {
        cfg.out = o;
    }
    if args.print_config {
        print!("{}", cfg.to_flat());
        return EXIT_OK;
    }
    if let Err(e) = cfg.validate() {
        eprintln!("error: {e}");
        return EXIT_USAGE;
    }
    let result = match kind {
        CommandKind::TrainPrior => commands::cmd_train_prior(&cfg),
        CommandKind::Sample => commands::cmd_sample(&cfg),
        CommandKind::Distill => commands::cmd_distill(&cfg),
        CommandKind::Pipeline => commands::cmd_pipeline(&cfg),
        CommandKind::Compare => commands::cmd_compare(&cfg),
        CommandKind::Eval => commands::cmd_eval(&cfg),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}
