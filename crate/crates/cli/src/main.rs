use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use fairtat_core::experiment::{eval_checkpoint, run_dir, run_experiment, verify_report, ExperimentConfig, RawConfig};
use fairtat_core::Error;

/// Fair targeted adversarial training experiments.
#[derive(Debug, Parser)]
#[command(name = "fairtat", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train and evaluate every seed of a config, then write the report files.
    Run {
        /// Config file with `section.key = value` lines.
        config: PathBuf,
        /// Training mode; overrides `run.mode`.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Run this single seed; overrides `run.seeds`.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Validate the config and print it with all defaults resolved.
        #[arg(long)]
        dry_run: bool,
        /// Suppress the per-epoch progress lines.
        #[arg(long, short)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on the test data the config produces for the
    /// checkpoint's seed and print the tables as JSON.
    Eval { checkpoint: PathBuf, config: PathBuf },
    /// Recompute every number of a report from its checkpoints and config.
    Verify { report: PathBuf },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ModeArg {
    FairTat,
    UntargetedAt,
}

fn load_config(path: &Path, overrides: &[(&str, String)]) -> Result<ExperimentConfig, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut raw = RawConfig::parse(&text)?;
    for (key, value) in overrides {
        raw.set(key, value.clone())?;
    }
    ExperimentConfig::from_raw(&raw)
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run {
            config,
            mode,
            seed,
            out,
            dry_run,
            quiet,
        } => {
            let mut overrides = Vec::new();
            if let Some(mode) = mode {
                let name = match mode {
                    ModeArg::FairTat => "fair_tat",
                    ModeArg::UntargetedAt => "untargeted_at",
                };
                overrides.push(("run.mode", name.to_string()));
            }
            if let Some(seed) = seed {
                overrides.push(("run.seeds", seed.to_string()));
            }
            if let Some(out) = out {
                overrides.push(("output.dir", out.display().to_string()));
            }
            let cfg = match load_config(&config, &overrides) {
                Ok(cfg) => cfg,
                Err(e @ Error::Config { .. }) => {
                    eprintln!("{}: {e}", config.display());
                    return Ok(ExitCode::from(2));
                }
                Err(e) => return Err(e.into()),
            };
            if dry_run {
                print!("{}", cfg.resolved_text());
                return Ok(ExitCode::SUCCESS);
            }
            let report = run_experiment(&cfg, |seed, record| {
                if !quiet {
                    println!("seed {seed}  {}", record.progress_line());
                }
            })?;
            let dir = run_dir(&cfg);
            for run in &report.runs {
                if let fairtat_core::experiment::RunStatus::Failed { error } = &run.status {
                    eprintln!("seed {} failed: {error}", run.seed);
                }
            }
            println!("report written to {}", dir.join("report.json").display());
            Ok(if report.succeeded() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Eval { checkpoint, config } => {
            let cfg = match load_config(&config, &[]) {
                Ok(cfg) => cfg,
                Err(e @ Error::Config { .. }) => {
                    eprintln!("{}: {e}", config.display());
                    return Ok(ExitCode::from(2));
                }
                Err(e) => return Err(e.into()),
            };
            let report = eval_checkpoint(&checkpoint, &cfg)
                .with_context(|| format!("evaluating {}", checkpoint.display()))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { report } => {
            let summary = verify_report(&report).with_context(|| format!("verifying {}", report.display()))?;
            println!(
                "verified {} run(s), {} numbers, max abs difference {:e}",
                summary.runs, summary.numbers_checked, summary.max_abs_difference
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
