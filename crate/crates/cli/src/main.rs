use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use blockdistill_cli::commands::{cmd_compare, cmd_eval, cmd_prune, cmd_select_hparams, cmd_sweep, cmd_train};
use blockdistill_cli::{CliResult, ExperimentConfig};

#[derive(Parser)]
#[command(name = "blockdistill", version, about = "Distillation experiments on small residual networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training seed; overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one student (and its teacher, unless a checkpoint is given).
    Train(Common),
    /// Train once per (value, seed) of the configured sweep.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Runs in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Choose tau, then alpha, then beta on the validation split.
    SelectHparams {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Magnitude-prune a checkpoint and fine-tune it.
    Prune(Common),
    /// Evaluate a checkpoint on every split.
    Eval(Common),
    /// Merge run summaries into one table.
    Compare {
        /// Run directories, in table order.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn load(c: &Common) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(out) = &c.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = c.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(c) => {
            let s = cmd_train(&load(&c)?)?;
            println!("{}", s.line());
        }
        Command::Sweep { common, jobs } => {
            let cfg = load(&common)?;
            let rows = cmd_sweep(&cfg, jobs)?;
            println!("{} runs -> {}", rows.len(), cfg.out.join("sweep.csv").display());
        }
        Command::SelectHparams { common, jobs } => {
            let cfg = load(&common)?;
            let s = cmd_select_hparams(&cfg, jobs)?;
            println!("tau={} alpha={} beta={}", s.tau, s.alpha, s.beta);
        }
        Command::Prune(c) => {
            let s = cmd_prune(&load(&c)?)?;
            println!("{}", s.line());
        }
        Command::Eval(c) => {
            for (split, v) in cmd_eval(&load(&c)?)? {
                println!("{split} {v}");
            }
        }
        Command::Compare { dirs, out } => {
            let rows = cmd_compare(&dirs, &out)?;
            for r in rows {
                println!("{} {} depth={} params={} test={}", r.run, r.variant, r.depth, r.params, r.final_test);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
