use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use strata_core::pipeline::{Pipeline, PipelineConfig, Stage};
use strata_core::Error;

/// CRS risk-prediction pipeline: synthetic or OMOP-style input, matched
/// cohort, recency features, two-stage selection, tuned global and
/// stratum models, and a comparison report.
#[derive(Debug, Parser)]
#[command(name = "strata", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Pipeline config (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; overrides `paths.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Master seed; overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (0 = all cores); overrides `workers`.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Select features once on the full cohort instead of inside each fold.
    #[arg(long, global = true)]
    paper_mode: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort.
    Synth,
    /// Label CRS targets.
    Phenotype,
    /// Fit propensity scores and match controls 1:1.
    Match,
    /// Build the recency feature matrix.
    Encode,
    /// Prevalence and gain screens plus heterogeneity tests.
    Select,
    /// Tune the global and stratum models.
    Tune,
    /// Fit final models on the whole cohort.
    Train,
    /// Cross-validated global vs stratum comparison.
    Eval,
    /// Write report.json and report.md.
    Report,
    /// Every stage in order.
    Run,
    /// Print the resolved config and exit.
    Config,
}

fn resolve(cli: &Cli) -> Result<PipelineConfig, Error> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(out) = &cli.out {
        config.paths.out.clone_from(out);
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(workers) = cli.workers {
        config.workers = workers;
    }
    if cli.paper_mode {
        config.selection.paper_mode = true;
    }
    Ok(config)
}

fn execute(cli: &Cli) -> Result<(), Error> {
    let config = resolve(cli)?;
    let stage = match cli.command {
        Command::Config => {
            config.validate()?;
            println!("{}", serde_json::to_string_pretty(&config).map_err(Error::from)?);
            return Ok(());
        }
        Command::Run => None,
        Command::Synth => Some(Stage::Synth),
        Command::Phenotype => Some(Stage::Phenotype),
        Command::Match => Some(Stage::Match),
        Command::Encode => Some(Stage::Encode),
        Command::Select => Some(Stage::Select),
        Command::Tune => Some(Stage::Tune),
        Command::Train => Some(Stage::Train),
        Command::Eval => Some(Stage::Eval),
        Command::Report => Some(Stage::Report),
    };
    let pipeline = Pipeline::new(config)?;
    match stage {
        Some(stage) => pipeline.run_stage(stage).map(|_| ()),
        None => pipeline.run(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("STRATA_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
