use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use jpinn::trainer::Mode;
use jpinn_cli::commands::{cmd_ensemble, cmd_evaluate, cmd_importance, cmd_simulate, cmd_train, load_data};
use jpinn_cli::config::load_scenario;
use jpinn_cli::reproduce::run_reproduce;
use jpinn_cli::{CliError, RunConfig};

/// Log verbosity, in env_logger filter syntax.
const LOG_ENV: &str = "JPINN_LOG";

#[derive(Parser)]
#[command(name = "jpinn", version, about = "Joint physics-informed NO2/NOx regression on synthetic plume data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML); the bundled plume-small config when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Training mode override.
    #[arg(long)]
    mode: Option<Mode>,
    /// Worker threads for ensemble members and reproduce runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario through the simulator and write the dataset CSV.
    Simulate {
        /// Scenario file (TOML); the bundled plume-small scenario when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset CSV to write.
        #[arg(long)]
        out: PathBuf,
        /// Scenario seed override.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the bootstrap members and aggregate them.
    Ensemble {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Metrics of a train or ensemble output directory.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        /// Output directory of `train` or `ensemble`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Permutation importance of each covariate for a trained model.
    Importance {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Output directory of `train`.
        #[arg(long)]
        model: PathBuf,
    },
    /// Simulate, compare modes over the configured seeds, and run the ensembles.
    Reproduce {
        #[command(flatten)]
        common: Common,
    },
}

fn config(c: &Common) -> Result<RunConfig, CliError> {
    RunConfig::load(c.config.as_deref())?.resolve(c.seed, c.mode)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { config, out, seed } => {
            let mut scenario = load_scenario(config.as_deref())?;
            if let Some(s) = seed {
                scenario.seed = s;
            }
            cmd_simulate(&scenario, &out)?;
        }
        Command::Train { common, data } => {
            let cfg = config(&common)?;
            let ds = load_data(&data)?;
            let o = cmd_train(&cfg, &ds, &common.out)?;
            if let Some(last) = o.history.last() {
                log::info!("final loss {:.6e}", last.loss);
            }
        }
        Command::Ensemble { common, data } => {
            let cfg = config(&common)?;
            let ds = load_data(&data)?;
            let run = cmd_ensemble(&cfg, &ds, &common.out, common.jobs)?;
            let (cov, n) = run.coverage(&ds);
            log::info!("held-out coverage over {n} rows: {cov:?}");
        }
        Command::Evaluate { data, model, out } => {
            let ds = load_data(&data)?;
            for m in cmd_evaluate(&ds, &model, &out)? {
                println!("{} {} n={} r2={:?} rmse={:.4}", m.split, m.species.name(), m.n, m.r2, m.rmse);
            }
        }
        Command::Importance { common, data, model } => {
            let cfg = config(&common)?;
            let ds = load_data(&data)?;
            for (i, r) in cmd_importance(&cfg, &ds, &model, &common.out)?.iter().enumerate() {
                println!("{:>2} {:<16} {:.5}", i + 1, r.covariate, r.score);
            }
        }
        Command::Reproduce { common } => {
            let cfg = config(&common)?;
            run_reproduce(&cfg, &common.out, common.jobs)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
