use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tno::run::{cmd_ablate, cmd_eval, cmd_generate, cmd_train, RunConfig, OUT_DIR_ENV};
use tno::Error;

#[derive(Parser)]
#[command(name = "tno", version, about = "Generate PDE data, train and evaluate temporal neural operators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve and store a dataset.
    Generate(Common),
    /// Train one model on a stored dataset.
    Train(Common),
    /// Write the error-accumulation table for a checkpoint.
    Eval(Common),
    /// Train and evaluate every configured variant and seed.
    Ablate(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run config; defaults apply to every key it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint directory for `eval` (default: <out>/train/best).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output root.
    #[arg(long, env = OUT_DIR_ENV)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Upper bound on worker threads. Every command currently runs on one.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    threads: u64,
    /// Override a config key, e.g. `--set train.lr0=5e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument { .. } | Error::Unstable(_) => 2,
        Error::MissingInput(_) => 3,
        Error::IncompatibleCheckpoint(_) => 4,
        _ => 1,
    }
}

fn resolve(c: &Common) -> tno::Result<RunConfig> {
    let mut cfg = RunConfig::load(c.config.as_deref(), &c.overrides)?;
    if let Some(out) = &c.out {
        cfg.out_dir = Some(out.clone());
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> tno::Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let cfg = resolve(&c)?;
            let m = cmd_generate(&cfg)?;
            println!(
                "dataset written to {}: {}/{}/{} trajectories",
                cfg.dataset_path().display(),
                m.train.count,
                m.val.count,
                m.test.count
            );
        }
        Command::Train(c) => {
            let cfg = resolve(&c)?;
            let log = cmd_train(&cfg)?;
            let best = log.records.iter().min_by(|a, b| a.val_loss.total_cmp(&b.val_loss));
            if let Some(b) = best {
                println!("best epoch {} val_loss {:.4e}", b.epoch, b.val_loss);
            }
        }
        Command::Eval(c) => {
            let cfg = resolve(&c)?;
            let table = cmd_eval(&cfg, c.checkpoint.as_deref())?;
            println!("{} rows written to {}", table.rows.len(), cfg.out_root().join("eval/metrics.csv").display());
        }
        Command::Ablate(c) => {
            let cfg = resolve(&c)?;
            let res = cmd_ablate(&cfg)?;
            for r in &res.runs {
                match &r.error {
                    None => println!("{} ok ({} parameters)", r.run_id, r.parameters),
                    Some(e) => println!("{} FAILED: {e}", r.run_id),
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
