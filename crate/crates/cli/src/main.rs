use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use recourse_cli::config::ExperimentConfig;
use recourse_cli::error::{CliError, Result};
use recourse_cli::figures::{emit_plot_data, Figure};
use recourse_cli::pipeline::{run_pipeline, read_bounds, RunPlan, Stage};

#[derive(Parser)]
#[command(
    name = "recourse",
    version,
    about = "Counterfactual robustness under model change: experiments, stability scoring, and bound verification"
)]
struct Cli {
    /// Cap the worker-thread count; results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline (or a single stage with --stage).
    Run {
        #[command(flatten)]
        common: RunArgs,
        /// Run exactly this stage, resuming from existing artifacts.
        #[arg(long)]
        stage: Option<String>,
    },
    /// Run the pipeline through the bound grid and fail on violations.
    VerifyBounds {
        #[command(flatten)]
        common: RunArgs,
    },
    /// Run the pipeline through stability scoring.
    Stability {
        #[command(flatten)]
        common: RunArgs,
    },
    /// Run the pipeline through counterfactual generation.
    Counterfactual {
        #[command(flatten)]
        common: RunArgs,
    },
    /// Export plot-ready tables from existing run artifacts.
    EmitPlotData {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Run directory holding the artifacts.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override the config seed (must match the run).
        #[arg(long)]
        seed: Option<u64>,
        /// bound-curves | validity-vs-tau | divergence-trace
        #[arg(long)]
        figure: String,
    },
    /// Run a small built-in experiment end to end.
    Selftest,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        // ignore failure if a pool already exists (repeated calls in tests)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run { common, stage } => {
            let resolved = ExperimentConfig::load(&common.config, common.seed)?;
            let plan = match stage {
                Some(name) => RunPlan::Single(Stage::from_name(&name)?),
                None => RunPlan::Through(Stage::Bounds),
            };
            let manifest = run_pipeline(&resolved, &common.out, plan)?;
            println!(
                "run complete: config {} ({} stage outputs under {})",
                &manifest.config_hash[..12],
                manifest.stages.len(),
                common.out.display()
            );
            Ok(())
        }
        Command::VerifyBounds { common } => {
            let resolved = ExperimentConfig::load(&common.config, common.seed)?;
            run_pipeline(&resolved, &common.out, RunPlan::Through(Stage::Bounds))?;
            let rows = read_bounds(&resolved, &common.out)?;
            let violations: Vec<String> = rows
                .iter()
                .filter(|r| r.violated)
                .map(|r| {
                    format!(
                        "{} k={} eps={} ell={:?}: freq {} > bound {}",
                        r.theorem, r.k, r.epsilon, r.ell, r.freq, r.rhs
                    )
                })
                .collect();
            let vacuous = rows.iter().filter(|r| r.rhs >= 1.0).count();
            println!(
                "verified {} grid points ({} vacuous), {} violations",
                rows.len(),
                vacuous,
                violations.len()
            );
            if violations.is_empty() {
                Ok(())
            } else {
                Err(CliError::BoundViolation(violations.join("; ")))
            }
        }
        Command::Stability { common } => {
            let resolved = ExperimentConfig::load(&common.config, common.seed)?;
            run_pipeline(&resolved, &common.out, RunPlan::Through(Stage::Stability))?;
            println!("stability scoring complete under {}", common.out.display());
            Ok(())
        }
        Command::Counterfactual { common } => {
            let resolved = ExperimentConfig::load(&common.config, common.seed)?;
            run_pipeline(&resolved, &common.out, RunPlan::Through(Stage::Counterfactual))?;
            println!("counterfactual generation complete under {}", common.out.display());
            Ok(())
        }
        Command::EmitPlotData { config, out, seed, figure } => {
            let resolved = ExperimentConfig::load(&config, seed)?;
            let figure = Figure::from_name(&figure)?;
            let path = emit_plot_data(&resolved, &out, figure)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Selftest => recourse_cli::selftest::run_selftest(),
    }
}
