use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use gmc_core::config::Params;
use gmc_core::harness::{exit_code, Plan, EXPERIMENTS};
use gmc_core::Error;

/// Runs one registered experiment, or the whole battery, and writes
/// `report.json` plus CSV tables.
#[derive(Parser, Debug)]
#[command(name = "gmc", version)]
struct Cli {
    /// Experiment id, or `battery` for all gated experiments.
    experiment: String,
    /// Flat `key = value` parameter file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides `seed` in the file.
    #[arg(long)]
    seed: Option<u64>,
    /// Replica count; overrides `replicas` in the file.
    #[arg(long)]
    replicas: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "gmc-out")]
    out: PathBuf,
    /// Print only the pass/fail line of each experiment.
    #[arg(long)]
    quiet: bool,
}

fn run(cli: &Cli) -> Result<bool, Error> {
    if !EXPERIMENTS.contains(&cli.experiment.as_str()) {
        return Err(Error::Schema(format!(
            "unknown experiment `{}`; known: {}",
            cli.experiment,
            EXPERIMENTS.join(", ")
        )));
    }
    let params = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Schema(format!("cannot read {}: {e}", path.display())))?;
            Params::parse(&text)?
        }
        None => Params::default(),
    };
    let plan = Plan::new(&cli.experiment, params, cli.seed, cli.replicas)?;
    let report = plan.run_with(|run| {
        let mark = if run.passed { "pass" } else { "FAIL" };
        eprintln!("{:<24} {mark}  {:.1}s", run.experiment, run.wall_clock_seconds);
    })?;
    report.write(&cli.out)?;
    if !cli.quiet {
        print!("{}", report.summary());
    }
    Ok(report.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("gmc: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
