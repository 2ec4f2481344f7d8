use std::fs::{self, File};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sddpc::harness::{
    collect_data, compare_controllers, equivalence_check, mc_validate_distribution, run_experiment,
    save_json, write_offline_csv, ExperimentConfig, HarnessError,
};

/// Stochastic and data-driven predictive control experiments.
#[derive(Parser)]
#[command(name = "sddpc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the configured one, then `.`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one closed-loop experiment.
    Run(Common),
    /// Compare the model-based and data-driven stochastic controllers on
    /// the same noise.
    Equivalence(Common),
    /// Monte-Carlo check of the predicted input/output distributions.
    McValidate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
    },
    /// Run several controllers on shared noise; the config is a JSON array.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Seeded runs per controller.
        #[arg(long, default_value_t = 1)]
        runs: usize,
    },
    /// Record offline input/output data from the configured plant.
    CollectData(Common),
}

/// Failure with its process exit code.
struct Failure(u8, String);

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Failure(if e.is_validation() { 2 } else { 1 }, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure(1, e.to_string())
    }
}

fn load(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: Option<&ExperimentConfig>) -> Result<PathBuf, Failure> {
    let dir = common
        .out
        .clone()
        .or_else(|| cfg.and_then(|c| c.output_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run(common) => {
            let cfg = load(&common)?;
            let rep = run_experiment(&cfg)?;
            rep.save(&out_dir(&common, Some(&cfg))?)?;
            println!(
                "{}: cumulative cost {:.6e}, violation rate {:.4}, violation amount {:.6e}, fallbacks {}",
                rep.controller, rep.cumulative_cost, rep.violation_rate, rep.total_violation_amount, rep.fallback_count
            );
        }
        Command::Equivalence(common) => {
            let cfg = load(&common)?;
            let rep = equivalence_check(&cfg)?;
            save_json(
                &out_dir(&common, Some(&cfg))?.join("equivalence.json"),
                &rep,
            )?;
            println!(
                "max relative deviation {:.3e} (tolerance {:.1e}): {}",
                rep.max_deviation,
                rep.tolerance,
                if rep.passed { "pass" } else { "FAIL" }
            );
            if !rep.passed {
                return Err(Failure(3, "trajectories differ beyond tolerance".into()));
            }
        }
        Command::McValidate { common, samples } => {
            let cfg = load(&common)?;
            let rep = mc_validate_distribution(&cfg, samples)?;
            save_json(&out_dir(&common, Some(&cfg))?.join("mc_report.json"), &rep)?;
            println!(
                "{} samples, max |z| {:.3} (threshold {}): {}",
                rep.samples,
                rep.max_abs_z,
                rep.threshold,
                if rep.passed { "pass" } else { "FAIL" }
            );
            if !rep.passed {
                return Err(Failure(
                    1,
                    "empirical moments deviate from the prediction".into(),
                ));
            }
        }
        Command::Compare { common, runs } => {
            let mut cfgs = ExperimentConfig::load_list(&common.config)?;
            if let Some(seed) = common.seed {
                cfgs.iter_mut().for_each(|c| c.seed = seed);
            }
            let cmp = compare_controllers(&cfgs, runs)?;
            cmp.save(&out_dir(&common, cfgs.first())?)?;
            for row in &cmp.rows {
                println!(
                    "{}: violation rate {:.4}, violation amount {:.6e}, cumulative cost {:.6e}",
                    row.controller,
                    row.violation_rate,
                    row.total_violation_amount,
                    row.cumulative_cost
                );
            }
        }
        Command::CollectData(common) => {
            let cfg = load(&common)?;
            let prep = cfg.prepare()?;
            let data = collect_data(&cfg, &prep)?;
            let path = out_dir(&common, Some(&cfg))?.join("offline.csv");
            write_offline_csv(&data, File::create(&path)?)?;
            println!("{} samples written to {}", data.len(), path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
