use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use hdistill_cli::commands;
use hdistill_cli::{exit_code, Objective, RunConfig};

#[derive(Parser)]
#[command(name = "hdistill", version, about = "Hybrid feature/relation distillation for tiny ViTs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Supervised,
    Mim,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and eval splits.
    GenData { config: PathBuf },
    /// Pretrain one teacher.
    TrainTeacher {
        config: PathBuf,
        #[arg(long, value_enum)]
        objective: ObjectiveArg,
    },
    /// Distill a student from a classification and a reconstruction teacher.
    Distill {
        config: PathBuf,
        #[arg(long)]
        teacher_c: PathBuf,
        #[arg(long)]
        teacher_m: PathBuf,
    },
    /// Per-head attention distance and NMI over evaluation probes.
    Analyze {
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[arg(long, default_value_t = 256)]
        probes: usize,
        #[arg(long, default_value_t = 7)]
        probe_seed: u64,
        /// Defaults to the checkpoint's directory.
        #[arg(long, env = "HDISTILL_OUT")]
        out: Option<PathBuf>,
    },
    /// Per-layer deltas (b - a) between two JSON reports.
    Compare { report_a: PathBuf, report_b: PathBuf },
    /// Print the desk-scale config as a starting point.
    InitConfig,
}

fn load(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config } => {
            let files = commands::gen_data(&load(&config)?)?;
            println!("{}\n{}", files.train.display(), files.eval.display());
        }
        Command::TrainTeacher { config, objective } => {
            let objective = match objective {
                ObjectiveArg::Supervised => Objective::Supervised,
                ObjectiveArg::Mim => Objective::Mim,
            };
            println!("{}", commands::train_teacher(&load(&config)?, objective)?.display());
        }
        Command::Distill {
            config,
            teacher_c,
            teacher_m,
        } => {
            let out = commands::distill(&load(&config)?, &teacher_c, &teacher_m)?;
            println!("{}\n{}", out.student.display(), out.metrics.display());
        }
        Command::Analyze {
            checkpoint,
            dataset,
            probes,
            probe_seed,
            out,
        } => {
            let files = commands::analyze(&checkpoint, &dataset, probes, probe_seed, out.as_deref())?;
            println!("{}\n{}", files.csv.display(), files.json.display());
        }
        Command::Compare { report_a, report_b } => {
            let deltas = commands::compare(&report_a, &report_b)?;
            commands::write_deltas(&deltas, std::io::stdout().lock())?;
        }
        Command::InitConfig => println!("{}", RunConfig::desk_scale().to_json()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
