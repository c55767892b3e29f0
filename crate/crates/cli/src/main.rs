use std::path::PathBuf;
use std::process::ExitCode;

use atpinn_core::harness::{self, preset_names, ExperimentConfig, Profile, SweepParam};
use atpinn_core::oracle::{cache_path, load_or_build};
use atpinn_core::{Error, PdeProblem};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "atpinn", version, about = "Train PINNs with adaptive collocation strategies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a TOML file or a builtin preset.
    Run {
        /// Config path or preset name (see `atpinn presets`).
        config: String,
        /// `desk` divides every epoch count by 10.
        #[arg(long, default_value = "full")]
        profile: Profile,
        /// Run only this seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: runs/<problem>-<strategy>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one experiment per value of an attack or training parameter.
    Sweep {
        config: String,
        /// One of T, m, eta, epsilon, N, epochs, seed.
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, default_value = "full")]
        profile: Profile,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reference-solution cache.
    Oracle {
        #[command(subcommand)]
        action: OracleAction,
    },
    /// List builtin presets.
    Presets,
}

#[derive(Subcommand)]
enum OracleAction {
    /// Compute (or load) the reference grid for a problem.
    Build {
        /// poisson2d, burgers, multiscale or allen_cahn.
        problem: String,
        #[arg(long, default_value = "oracle_cache")]
        cache_dir: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        e if e.is_numerical() => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { config, profile, seed, out } => {
            let runs = harness::run_from_config(&config, profile, seed, out.as_deref())?;
            for r in runs {
                let last = r.rows.last().expect("at least one iteration");
                println!(
                    "seed {}: {} = {:.6e} with {} samples ({})",
                    r.seed,
                    last.metric_name,
                    last.metric,
                    last.samples,
                    r.dir.display()
                );
            }
        }
        Command::Sweep { config, param, values, profile, out } => {
            let cfg = ExperimentConfig::resolve(&config)?;
            let out = out.unwrap_or_else(|| cfg.default_output_dir().join(format!("sweep_{}", param.as_str())));
            let path = harness::sweep(&cfg, param, &values, profile, &out)?;
            println!("{}", path.display());
        }
        Command::Oracle { action: OracleAction::Build { problem, cache_dir } } => {
            let problem = PdeProblem::by_name(&problem)?;
            let grid = load_or_build(&problem, Some(&cache_dir))?;
            println!("{} ({} values)", cache_path(&cache_dir, &problem).display(), grid.len());
        }
        Command::Presets => {
            for name in preset_names() {
                println!("{name}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
