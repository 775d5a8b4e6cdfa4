//! `twinloc` command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use twinloc::estimator::Mode;
use twinloc::evaluation::EvalAlignment;
use twinloc_cli::bench::DEFAULT_SEEDS;
use twinloc_cli::bundle::json_string;
use twinloc_cli::commands::{cmd_bench, cmd_evaluate, cmd_gps_model, cmd_run, cmd_simulate, load_config, load_scenario};
use twinloc_cli::CliError;

#[derive(Parser)]
#[command(name = "twinloc", version, about = "Seeded visual-inertial localization experiments against a city twin")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate every sensor stream and write a scenario bundle.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit the GNSS satellite-count and multipath models on a scene.
    GpsModel {
        /// Configuration whose scene is used.
        #[arg(long, conflicts_with = "bundle")]
        config: Option<PathBuf>,
        /// Bundle whose configuration is used.
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Number of random training positions.
        #[arg(long)]
        samples: Option<usize>,
        /// Mixture components per height bin.
        #[arg(long)]
        components: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the estimator on a bundle or on a freshly simulated configuration.
    Run {
        #[arg(long, conflicts_with = "config")]
        bundle: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured mode.
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        /// Register synchronously so that results are bit-reproducible.
        #[arg(long)]
        deterministic: bool,
    },
    /// Compute trajectory errors of an estimate against ground truth.
    Evaluate {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        est: PathBuf,
        /// none, yaw4dof or se3; chosen from the estimate frame when unset.
        #[arg(long)]
        alignment: Option<EvalAlignment>,
        /// Manifest providing the configuration hash and seed.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the benchmark suite.
    Bench {
        #[arg(long)]
        out: PathBuf,
        /// Number of seeds, starting at 1.
        #[arg(long, default_value_t = DEFAULT_SEEDS.len() as u64)]
        seeds: u64,
        #[arg(long)]
        deterministic: bool,
    },
}

fn execute(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Simulate { config, out, seed } => {
            let manifest = cmd_simulate(&load_config(&config, seed)?, &out)?;
            Ok(json_string(&manifest.files))
        }
        Command::GpsModel { config, bundle, out, samples, components, seed } => {
            let mut cfg = match (config, bundle) {
                (Some(path), None) => load_config(&path, None)?,
                (None, Some(dir)) => twinloc_cli::bundle::read_json::<twinloc_cli::bundle::Manifest>(
                    &dir.join(twinloc_cli::bundle::MANIFEST_FILE),
                )?
                .config,
                _ => return Err(CliError::config("input", "pass exactly one of --bundle or --config")),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            Ok(json_string(&cmd_gps_model(cfg, samples, components, &out)?))
        }
        Command::Run { bundle, config, out, mode, seed, deterministic } => {
            let sc = load_scenario(bundle.as_ref(), config.as_ref(), seed)?;
            let mode = mode.unwrap_or(sc.config.mode);
            let deterministic = deterministic || sc.config.estimator.deterministic;
            Ok(json_string(&cmd_run(&sc, mode, deterministic, &out)?))
        }
        Command::Evaluate { gt, est, alignment, manifest, out } => {
            Ok(json_string(&cmd_evaluate(&gt, &est, alignment, manifest.as_deref(), out.as_deref())?))
        }
        Command::Bench { out, seeds, deterministic } => {
            let seeds: Vec<u64> = (1..=seeds).collect();
            let report = cmd_bench(&seeds, deterministic, &out)?;
            Ok(twinloc_cli::bench::format_table(&report))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", CliError::Usage(e.to_string().trim_end().to_string()).to_json());
            return ExitCode::from(2);
        }
    };
    match execute(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
