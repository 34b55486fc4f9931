use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dudes::config::ExperimentConfig;
use dudes::pipeline::{Pipeline, Stage, StageStatus};

/// Environment variable holding the worker thread count.
const THREADS_ENV: &str = "DUDES_THREADS";

#[derive(Parser, Debug)]
#[command(name = "dudes", version, about = "Ensemble uncertainty distillation experiments")]
struct Cli {
    /// Flat `key = value` config file; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one key (`key=value`); repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Output root for all stage directories.
    #[arg(long, default_value = "runs/default", global = true)]
    out: PathBuf,

    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Shorthand for `--set teacher.members=M`.
    #[arg(long, global = true)]
    members: Option<usize>,

    /// Re-run stages even when their inputs are unchanged.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate the synthetic train and test sets.
    GenData,
    /// Train the ensemble members.
    TrainTeacher,
    /// Compute (or refresh) cached teacher targets for the training set.
    DistillTargets,
    /// Train the dual-head student on labels and teacher uncertainty.
    TrainStudent,
    /// Evaluate teacher and student on the test set.
    Eval,
    /// Sparsification curves for teacher and student.
    Sparsify,
    /// Mean uncertainty versus ensemble size.
    AblateMembers,
    /// Single-image inference timing.
    Bench,
    /// Gradient checks for every op and the student loss.
    GradCheck,
    /// Collect tables, curves and a summary from earlier stages.
    Report,
    /// Every stage from gen-data to report.
    All,
    /// Print the resolved configuration.
    ShowConfig,
}

impl Command {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::GenData => Stage::GenData,
            Command::TrainTeacher => Stage::TrainTeacher,
            Command::DistillTargets => Stage::DistillTargets,
            Command::TrainStudent => Stage::TrainStudent,
            Command::Eval => Stage::Eval,
            Command::Sparsify => Stage::Sparsify,
            Command::AblateMembers => Stage::AblateMembers,
            Command::Bench => Stage::Bench,
            Command::GradCheck => Stage::GradCheck,
            Command::Report => Stage::Report,
            Command::All | Command::ShowConfig => return None,
        })
    }
}

fn resolve_config(cli: &Cli) -> dudes::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(m) = cli.members {
        cfg.teacher_members = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn configure_threads() -> dudes::Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .map_err(|_| dudes::Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| dudes::Error::Config(format!("thread pool: {e}")))
}

fn run(cli: &Cli) -> dudes::Result<()> {
    configure_threads()?;
    let cfg = resolve_config(cli)?;
    if let Command::ShowConfig = cli.command {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let pipeline = Pipeline::new(cfg, &cli.out).with_force(cli.force);
    match cli.command.stage() {
        Some(stage) => {
            let status = pipeline.run(stage)?;
            let what = match status {
                StageStatus::Ran => "done",
                StageStatus::UpToDate => "up to date",
            };
            println!("{}: {what} ({})", stage.name(), pipeline.dir(stage).display());
        }
        None => {
            pipeline.run_all()?;
            println!("all stages complete ({})", cli.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
