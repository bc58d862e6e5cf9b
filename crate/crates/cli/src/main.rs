//! Experiment runner: each subcommand maps onto one harness command.
//! Exit codes: 0 success, 1 config validation error, 2 runtime failure,
//! 3 failed check (gradcheck failure or incomplete comparison).

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use tridistill::config::{ExperimentConfig, Stage};
use tridistill::harness::{
    cmd_compare, cmd_count_params, cmd_distill, cmd_eval, cmd_gradcheck, cmd_train_teacher,
    EvalTarget, TrainOutcome,
};
use tridistill::{Error, Result};

#[derive(Parser)]
#[command(
    name = "tridistill",
    version,
    about = "Teacher-student distillation experiments"
)]
struct Cli {
    /// Experiment config file (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Run a single seed instead of the config's seed list.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Override the config's output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher model from scratch, once per seed.
    TrainTeacher,
    /// Train the student against a frozen teacher checkpoint.
    Distill,
    /// Score a saved checkpoint on the dataset's test split.
    Eval {
        /// Which configured model to score.
        #[arg(value_enum)]
        target: Target,
    },
    /// Report trainable-parameter counts and the student/teacher ratio.
    CountParams,
    /// Check every loss and layer gradient against finite differences.
    Gradcheck {
        /// Random inputs per checked surface.
        #[arg(long, default_value_t = 20)]
        rounds: usize,
    },
    /// Tabulate final accuracies (mean ± stddev) from metrics files.
    Compare {
        /// Config files naming runs that must be present in the table.
        #[arg(value_name = "CONFIG")]
        expect: Vec<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Target {
    Teacher,
    Student,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {}", e);
        std::process::exit(e.exit_code());
    }
}

/// The config with CLI overrides applied.
fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut cfg = ExperimentConfig::from_path(path)?;
    apply_overrides(cli, &mut cfg);
    Ok(cfg)
}

fn apply_overrides(cli: &Cli, cfg: &mut ExperimentConfig) {
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
}

fn print_runs(outcome: &TrainOutcome) {
    for run in &outcome.runs {
        match run.final_accuracy {
            Some(acc) => println!(
                "seed {}: test accuracy {:.4}, wrote {} and {}",
                run.seed,
                acc,
                run.checkpoint.display(),
                run.metrics.display()
            ),
            None => println!(
                "seed {}: wrote {} and {}",
                run.seed,
                run.checkpoint.display(),
                run.metrics.display()
            ),
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::TrainTeacher => {
            let cfg = load_config(&cli)?;
            // Validate and report the model size before any compute.
            cfg.validate(Stage::TrainTeacher)?;
            let params = cfg.teacher.as_ref().expect("validated").count_params()?;
            println!("teacher: {} parameters", params);
            print_runs(&cmd_train_teacher(&cfg)?);
        }
        Command::Distill => {
            let cfg = load_config(&cli)?;
            cfg.validate(Stage::Distill)?;
            let params = cfg.student.as_ref().expect("validated").count_params()?;
            println!("{}: {} parameters", cfg.method_label(), params);
            print_runs(&cmd_distill(&cfg)?);
        }
        Command::Eval { target } => {
            let cfg = load_config(&cli)?;
            let target = match target {
                Target::Teacher => EvalTarget::Teacher,
                Target::Student => EvalTarget::Student,
            };
            println!("{}", cmd_eval(&cfg, target)?);
        }
        Command::CountParams => {
            let cfg = load_config(&cli)?;
            print!("{}", cmd_count_params(&cfg)?);
        }
        Command::Gradcheck { rounds } => {
            let report = cmd_gradcheck(cli.seed.unwrap_or(0), *rounds)?;
            println!("{}", report);
            if !report.passed() {
                return Err(Error::CheckFailed("gradient check failed".into()));
            }
        }
        Command::Compare { expect } => {
            // Expected (method, seeds) pairs come from the listed configs
            // plus the global --config, if any.
            let mut expected = Vec::new();
            let mut dir = cli.out.clone();
            let paths = cli.config.iter().chain(expect.iter());
            for path in paths {
                let mut cfg = ExperimentConfig::from_path(path)?;
                apply_overrides(&cli, &mut cfg);
                dir.get_or_insert_with(|| cfg.output_dir.clone());
                // A config without a student or a teacher checkpoint can
                // only have produced teacher rows.
                let label = if cfg.student.is_none() && cfg.teacher_checkpoint.is_none() {
                    "teacher".to_string()
                } else {
                    cfg.method_label()
                };
                expected.push((label, cfg.seeds));
            }
            let dir = dir.ok_or_else(|| {
                Error::Config("compare needs --out or at least one config".into())
            })?;
            let report = cmd_compare(&dir, &expected)?;
            print!("{}", report);
            println!();
            print!("{}", report.to_tsv());
            if !report.is_complete() {
                return Err(Error::CheckFailed(format!(
                    "comparison incomplete: {} run(s) missing",
                    report.missing.len()
                )));
            }
        }
    }
    Ok(())
}
