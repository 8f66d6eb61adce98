//! `cluda`: generate data, train, evaluate, verify, and grid-search.
//!
//! Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime
//! error, 3 verification failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cluda_core::metrics::TaskKind;
use cluda_core::verify::VerifyOptions;
use config::{parse_assignment, parse_document, Assignment, ExperimentConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),
    #[error(transparent)]
    Runtime(#[from] cluda_core::Error),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Verification(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cluda", version, about = "Contrastive domain adaptation for time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key (repeatable), e.g. `--set lambda_cl=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed (the generator's for `generate`, the training seed otherwise).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic two-domain benchmark as CSV files.
    Generate(ConfigArgs),
    /// Train a model and write checkpoint, history and report.
    Train(ConfigArgs),
    /// Metrics of a checkpoint on one labeled split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Samples CSV (`series_id,t,<features>`).
        #[arg(long)]
        data: PathBuf,
        /// Labels CSV (`series_id,label`); defaults to `<data stem>_labels.csv`.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// `binary` or `ordinal-10`; must match the checkpoint.
        #[arg(long, value_parser = parse_task)]
        task: Option<TaskKind>,
        /// Also write the metrics to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gradient, loss-oracle, reversal, queue and augmentation checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random instances per check.
        #[arg(long, default_value_t = 100)]
        instances: usize,
        /// Directory for `verify.json`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Flip the reversal sign inside the reversal check.
        #[arg(long, hide = true)]
        break_reversal: bool,
    },
    /// Train every combination of the given value lists.
    Grid {
        #[command(flatten)]
        base: ConfigArgs,
        /// `KEY=V1,V2,...` (repeatable).
        #[arg(long = "grid", value_name = "KEY=VALUES", required = true)]
        axes: Vec<String>,
    },
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    TaskKind::parse(s).map_err(|e| e.to_string())
}

impl ConfigArgs {
    fn assignments(&self, seed_key: &str) -> Result<Vec<Assignment>, CliError> {
        let mut out = Vec::new();
        let mut errors = Vec::new();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Validation(vec![format!("{}: {e}", path.display())]))?;
            match parse_document(&text, &path.display().to_string()) {
                Ok(a) => out.extend(a),
                Err(e) => errors.extend(e),
            }
        }
        for s in &self.sets {
            match parse_assignment(s, "--set") {
                Ok(a) => out.push(a),
                Err(e) => errors.push(e),
            }
        }
        if let Some(seed) = self.seed {
            out.push(Assignment {
                key: seed_key.into(),
                value: seed.to_string(),
                origin: "--seed".into(),
            });
        }
        if let Some(dir) = &self.out {
            out.push(Assignment {
                key: "out_dir".into(),
                value: dir.display().to_string(),
                origin: "--out".into(),
            });
        }
        if errors.is_empty() {
            Ok(out)
        } else {
            Err(CliError::Validation(errors))
        }
    }

    fn resolve(&self, seed_key: &str) -> Result<ExperimentConfig, CliError> {
        ExperimentConfig::resolve(&self.assignments(seed_key)?).map_err(CliError::Validation)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(args) => {
            let config = args.resolve("synth.seed")?;
            commands::generate(&config, &config.out_dir)
        }
        Command::Train(args) => {
            let config = args.resolve("train.seed")?;
            commands::train_command(&config, &config.out_dir)
        }
        Command::Evaluate {
            checkpoint,
            data,
            labels,
            task,
            out,
        } => {
            let labels = labels.or_else(|| {
                let stem = data.file_stem()?.to_str()?;
                let guess = data.with_file_name(format!("{stem}_labels.csv"));
                guess.exists().then_some(guess)
            });
            let report = commands::evaluate_command(&checkpoint, &data, labels.as_deref(), task)?;
            let text = serde_json::to_string_pretty(&report).map_err(cluda_core::Error::from)?;
            println!("{text}");
            if let Some(path) = out {
                std::fs::write(&path, format!("{text}\n")).map_err(cluda_core::Error::from)?;
            }
            Ok(())
        }
        Command::Verify {
            seed,
            instances,
            out,
            break_reversal,
        } => {
            let opts = VerifyOptions {
                seed,
                instances,
                break_reversal,
            };
            let report = commands::verify_command(opts, out.as_deref())?;
            if report.passed() {
                Ok(())
            } else {
                let names: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
                Err(CliError::Verification(names.join(", ")))
            }
        }
        Command::Grid { base, axes } => {
            let mut parsed = Vec::new();
            let mut errors = Vec::new();
            for axis in &axes {
                match axis.split_once('=') {
                    Some((k, v)) if !k.trim().is_empty() => {
                        parsed.push((k.trim().to_string(), commands::split_values(v)))
                    }
                    _ => errors.push(format!("--grid {axis:?}: expected KEY=V1,V2,...")),
                }
            }
            let common = base.assignments("train.seed")?;
            let mut runs = Vec::new();
            for point in commands::grid_points(&parsed) {
                let mut a = common.clone();
                a.extend(point.iter().map(|(k, v)| Assignment {
                    key: k.clone(),
                    value: v.clone(),
                    origin: "--grid".into(),
                }));
                match ExperimentConfig::resolve(&a) {
                    Ok(c) => runs.push((point, c)),
                    Err(e) => errors.extend(e),
                }
            }
            if !errors.is_empty() {
                errors.dedup();
                return Err(CliError::Validation(errors));
            }
            let out = runs[0].1.out_dir.clone();
            let entries = commands::grid_command(runs, &out, commands::thread_cap()?)?;
            for e in &entries {
                println!(
                    "{} val {:.4} source {:.4} target {:.4} {:?}",
                    e.run, e.best_val_metric, e.source_test, e.target_test, e.settings
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
