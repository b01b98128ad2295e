use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mlcl_core::harness::{self, Dataset, ExperimentConfig, Trained};
use mlcl_core::Error;

#[derive(Parser)]
#[command(name = "mlcl", version, about = "Cooperative vehicle localization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Inputs {
    /// Dataset directory written by `gen`; regenerated from the configuration when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory with `<scheme>.ckpt.json` files; learned schemes are trained in memory when omitted.
    #[arg(long)]
    checkpoints: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate traces and write train/test episodes with a manifest.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train the learned schemes, writing checkpoints and learning curves.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from the checkpoints (with optimizer state) in this directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate every scheme over time on the test episodes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Evaluate across group sizes.
    SweepN {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Evaluate across communication ranges.
    SweepRange {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
}

fn config(common: &Common) -> mlcl_core::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn dataset(cfg: &ExperimentConfig, data: Option<&Path>) -> mlcl_core::Result<Dataset> {
    match data {
        Some(dir) => harness::load_dataset(dir, cfg).map(|(ds, _)| ds),
        None => harness::build_dataset(cfg),
    }
}

fn models(cfg: &ExperimentConfig, ds: &Dataset, checkpoints: Option<&Path>) -> mlcl_core::Result<Trained> {
    match checkpoints {
        Some(dir) => harness::load_trained(cfg, dir),
        None => harness::train_all(cfg, ds),
    }
}

fn run(cli: Cli) -> mlcl_core::Result<()> {
    match cli.command {
        Command::Gen { common } => {
            let cfg = config(&common)?;
            let m = harness::cmd_gen(&cfg, &common.out)?;
            println!("wrote {} train and {} test episodes to {}", m.train.len(), m.test.len(), common.out.display());
        }
        Command::Train { common, data, resume } => {
            let cfg = config(&common)?;
            let ds = dataset(&cfg, data.as_deref())?;
            let trained = harness::cmd_train(&cfg, &ds, &common.out, resume.as_deref())?;
            println!("trained {} model(s) into {}", trained.models.len(), common.out.display());
        }
        Command::Eval { common, inputs } => {
            let cfg = config(&common)?;
            let ds = dataset(&cfg, inputs.data.as_deref())?;
            let trained = models(&cfg, &ds, inputs.checkpoints.as_deref())?;
            let report = harness::cmd_eval(&cfg, &ds, &trained, &common.out)?;
            for r in &report.summary.rows {
                println!("{:<6} mae {:.3} m  (stderr {:.3}, {} episodes)", r.scheme, r.mae_m, r.stderr_m, r.n_episodes);
            }
        }
        Command::SweepN { common, inputs } => {
            let cfg = config(&common)?;
            let ds = dataset(&cfg, inputs.data.as_deref())?;
            let trained = models(&cfg, &ds, inputs.checkpoints.as_deref())?;
            let t = harness::cmd_sweep_n(&cfg, &ds, &trained, &common.out)?;
            println!("wrote {} rows to {}", t.rows.len(), common.out.join("sweep_n.csv").display());
        }
        Command::SweepRange { common, inputs } => {
            let cfg = config(&common)?;
            let ds = dataset(&cfg, inputs.data.as_deref())?;
            let trained = models(&cfg, &ds, inputs.checkpoints.as_deref())?;
            let t = harness::cmd_sweep_range(&cfg, &ds, &trained, &common.out)?;
            println!("wrote {} rows to {}", t.rows.len(), common.out.join("sweep_range.csv").display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Numeric(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
