use std::path::PathBuf;
use std::process::ExitCode;

use advland_xio::config::{RunConfig, Task};
use advland_xio::error::XioError;
use advland_xio::run::{run, Failure};
use clap::Parser;

/// Adversarial loss landscape experiments.
#[derive(Debug, Parser)]
#[command(name = "advland", version)]
struct Cli {
    task: Task,
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: the config's `out`, else `advland-out/<task>`).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn threads_from_env() -> Result<Option<usize>, XioError> {
    match std::env::var("ADVLAND_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(XioError::Config(format!(
                "ADVLAND_THREADS must be a positive integer, got {v:?}"
            ))),
        },
        Err(_) => Ok(None),
    }
}

fn prepare(cli: &Cli) -> Result<RunConfig, XioError> {
    if let Some(n) = threads_from_env()? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| XioError::Config(e.to_string()))?;
    }
    let mut cfg = RunConfig::load(&cli.config)?;
    match cfg.task {
        Some(t) if t != cli.task => {
            return Err(XioError::Config(format!(
                "command line task `{}` differs from config task `{t}`",
                cli.task
            )))
        }
        _ => cfg.task = Some(cli.task),
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match prepare(&cli) {
        Ok(c) => c,
        Err(e) => {
            let f = Failure::Invalid(e);
            eprintln!("{}", f.to_json());
            return ExitCode::from(f.exit_code() as u8);
        }
    };
    let base = cli
        .config
        .parent()
        .map(|p| p.to_path_buf())
        .unwrap_or_default();
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.out.as_ref().map(|o| base.join(o)))
        .unwrap_or_else(|| PathBuf::from("advland-out").join(cli.task.name()));
    match run(&cfg, &base, &out) {
        Ok(m) => {
            println!("{}: {} files in {}", m.task, m.outputs.len(), out.display());
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("{}", f.to_json());
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
