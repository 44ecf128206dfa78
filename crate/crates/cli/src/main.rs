//! Batch front end: loads run configurations, executes solve, validate,
//! consistency, and rate experiments, and writes CSV tables plus a
//! structured JSON result document.
//!
//! Exit codes: 0 on full success, 2 when any result row failed to
//! converge, 1 on configuration errors.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::ExperimentKind;

#[derive(Parser)]
#[command(name = "obstacle", version, about = "Obstacle-problem scheme experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Path to the TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for sampled validation (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker thread count.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a single problem and dump the field.
    Solve(RunArgs),
    /// Check the structural assumptions at sampled points.
    Validate(RunArgs),
    /// Measure scheme consistency errors over a list of steps.
    Consistency(RunArgs),
    /// Run the rate experiment configured in the file (rates-h,
    /// rates-eps, or combined).
    Rates(RunArgs),
    /// Preset registry commands.
    Presets {
        #[command(subcommand)]
        command: PresetsCommand,
    },
}

#[derive(Subcommand)]
enum PresetsCommand {
    /// List the shipped preset problems.
    List,
}

fn execute_run(args: &RunArgs, verb_kind: ExperimentKind) -> ExitCode {
    if let Some(threads) = args.threads {
        // Ignore failure: the global pool may already be initialized.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    let mut loaded = match config::load_config(&args.config) {
        Ok(c) => c,
        Err(err) => {
            eprintln!("error: {err}");
            return ExitCode::from(1);
        }
    };
    if let Some(seed) = args.seed {
        loaded.seed = seed;
    }
    if let Some(out) = &args.out {
        loaded.output.dir = Some(out.display().to_string());
    }
    let resolved = match config::resolve(loaded, Some(verb_kind)) {
        Ok(r) => r,
        Err(err) => {
            eprintln!("error: {err}");
            return ExitCode::from(1);
        }
    };
    let out_dir = resolved
        .config
        .output
        .dir
        .clone()
        .unwrap_or_else(|| "out".to_string());
    let output = match run::execute(&resolved) {
        Ok(o) => o,
        Err(err) => {
            eprintln!("error: {err}");
            return ExitCode::from(1);
        }
    };
    if let Err(err) = run::write_outputs(&output, std::path::Path::new(&out_dir)) {
        eprintln!("error: {err}");
        return ExitCode::from(1);
    }
    for row in &output.document.rows {
        println!(
            "h={} eps={} sup_error={} iterations={} residual={} status={}",
            row.h, row.eps, row.sup_error, row.iterations, row.residual, row.status
        );
    }
    if let Some(fit) = &output.document.rate_fit {
        println!(
            "rate fit: slope={} intercept={} r2={}",
            fit.slope, fit.intercept, fit.r_squared
        );
    }
    if let Some(entries) = &output.document.validation {
        for entry in entries {
            if entry.detail.is_empty() {
                println!("{}: {}", entry.id, entry.status);
            } else {
                println!("{}: {} ({})", entry.id, entry.status, entry.detail);
            }
        }
    }
    ExitCode::from(output.exit_code as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Command::Solve(args) => execute_run(args, ExperimentKind::Solve),
        Command::Validate(args) => execute_run(args, ExperimentKind::Validate),
        Command::Consistency(args) => execute_run(args, ExperimentKind::Consistency),
        Command::Rates(args) => execute_run(args, ExperimentKind::RatesH),
        Command::Presets { command } => match command {
            PresetsCommand::List => {
                for preset in obstacle_core::presets::registry() {
                    println!("{:<22} {}", preset.name, preset.summary);
                }
                ExitCode::SUCCESS
            }
        },
    }
}
