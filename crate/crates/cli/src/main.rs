use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mfg_inverse_cli::commands::{self, Overrides};
use mfg_inverse_cli::config::RunConfig;
use mfg_inverse_cli::verify::verify_dataset;

#[derive(Parser)]
#[command(
    name = "mfginv",
    version,
    about = "Speed-field and interaction-kernel recovery for mean-field games"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the number of events.
    #[arg(long)]
    events: Option<usize>,
    /// Forward iteration cap (generate, forward) or number of inversion
    /// iterations (invert).
    #[arg(long)]
    max_iter: Option<usize>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the configured example and write a measurement dataset.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Solve the forward problem for one event file.
    Forward {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        event: PathBuf,
        /// Parameter file; the configured example's ground truth if omitted.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Reconstruct the parameters from a dataset.
    Invert {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Check a dataset and run the numerical oracle suite.
    Verify {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn setup(threads: Option<usize>, config: Option<&PathBuf>) -> mfg_inverse::Result<RunConfig> {
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| mfg_inverse::Error::Config(e.to_string()))?;
    }
    match config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn overrides(c: &Common) -> Overrides {
    Overrides {
        seed: c.seed,
        events: c.events,
        max_iter: c.max_iter,
    }
}

fn run(cli: Cli) -> mfg_inverse::Result<ExitCode> {
    match cli.command {
        Command::Generate { common } => {
            let cfg = setup(common.threads, common.config.as_ref())?;
            let m = commands::generate(&cfg, &overrides(&common), &common.out)?;
            println!("wrote {} events to {}", m.events, common.out.display());
        }
        Command::Forward { common, event, params } => {
            let cfg = setup(common.threads, common.config.as_ref())?;
            let s = commands::forward(&cfg, &overrides(&common), &event, params.as_deref(), &common.out)?;
            println!(
                "{} after {} iterations: gap {:.3e}, mass drift {:.1e}",
                if s.converged { "converged" } else { "not converged" },
                s.iterations,
                s.gap,
                s.mass_drift
            );
            if !s.converged {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Invert { common, dataset } => {
            let cfg = setup(common.threads, common.config.as_ref())?;
            let r = commands::invert(&cfg, &overrides(&common), &dataset, &common.out, |n, res| {
                eprintln!("n = {n:5}  Res = {res:.6e}");
            })?;
            println!(
                "n_opt = {}, Res = {:.6e} (initial {:.6e})",
                r.n_opt, r.res_history[r.n_opt].res, r.res_history[0].res
            );
        }
        Command::Verify { dataset, threads } => {
            setup(threads, None)?;
            let checks = verify_dataset(&dataset)?;
            let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
            for c in &checks {
                println!(
                    "{}  {:width$}  {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
            }
            if checks.iter().any(|c| !c.passed) {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
