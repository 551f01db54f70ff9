//! Command-line entry point: every subcommand reads one JSON config and writes
//! into `--out`. Exit codes: 0 success, 1 invalid input, 2 runtime failure.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use colabel::net::Variant;

use crate::commands::Context;
use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult, EXIT_VALIDATION};

#[derive(Debug, Parser)]
#[command(name = "colabel", version, about = "Synthetic vehicle data, label completion and multi-branch classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON config for the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the model variant (CoLabel, FusionOnly, MultiInput, NoAtt, SMBL, 2SC).
    #[arg(long, global = true)]
    pub variant: Option<Variant>,
    /// Runs only the named pipeline stage.
    #[arg(long, global = true)]
    pub stage: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Render synthetic datasets.
    Generate,
    /// Complete missing annotations with labeling teams.
    Integrate,
    /// Train a single labeling-team member.
    TrainMember,
    /// Train one model.
    Train,
    /// Score a trained run on a dataset.
    Eval,
    /// Train every variant over every seed and compare convergence.
    Ablate,
    /// Apply knowledge-base corrections to a trained run's predictions.
    Correct,
    /// Gather run, integration and evaluation outputs into tables.
    Report,
    /// Run a sequence of stages from a pipeline config.
    Pipeline,
}

impl Command {
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "generate" => Self::Generate,
            "integrate" => Self::Integrate,
            "train-member" => Self::TrainMember,
            "train" => Self::Train,
            "eval" => Self::Eval,
            "ablate" => Self::Ablate,
            "correct" => Self::Correct,
            "report" => Self::Report,
            _ => return None,
        })
    }
}

fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    value.as_deref().ok_or_else(|| CliError::validation(format!("--{flag} is required")))
}

fn run_command(command: Command, ctx: &Context, config: &Path) -> CliResult<()> {
    match command {
        Command::Generate => commands::generate(ctx, config),
        Command::Integrate => commands::integrate_cmd(ctx, config),
        Command::TrainMember => commands::train_member_cmd(ctx, config),
        Command::Train => commands::train_cmd(ctx, config),
        Command::Eval => commands::eval(ctx, config),
        Command::Ablate => commands::ablate(ctx, config),
        Command::Correct => commands::correct(ctx, config),
        Command::Report => report_cmd(ctx, config),
        Command::Pipeline => Err(CliError::validation("pipelines cannot nest")),
    }
}

fn report_cmd(ctx: &Context, config: &Path) -> CliResult<()> {
    let report_config: config::ReportConfig = config::load(config)?;
    let gathered = report::gather(&report_config, &ctx.base);
    let (md, csv) = report::render(&gathered);
    std::fs::create_dir_all(&ctx.out)?;
    std::fs::write(ctx.out.join("report.md"), md)?;
    std::fs::write(ctx.out.join("variants.csv"), csv)?;
    if gathered.missing.is_empty() {
        Ok(())
    } else {
        let list: Vec<String> = gathered.missing.iter().map(|p| p.display().to_string()).collect();
        Err(CliError::validation(format!("missing inputs (partial report written): {}", list.join(", "))))
    }
}

fn pipeline(cli: &Cli) -> CliResult<()> {
    let path = require(&cli.config, "config")?;
    let mut config: PipelineConfig = config::load(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    if let Some(out) = &cli.out {
        config.out = out.clone();
    }
    let seed = cli.seed.unwrap_or(config.seed);
    let mut stages = Vec::new();
    for s in &config.stages {
        let command = Command::from_name(&s.command)
            .ok_or_else(|| CliError::validation(format!("stage `{}`: unknown command `{}`", s.name, s.command)))?;
        stages.push((s, command, config::existing(dir, &s.config)?));
    }
    if let Some(only) = &cli.stage {
        if !stages.iter().any(|(s, _, _)| &s.name == only) {
            return Err(CliError::validation(format!("no stage named `{only}`")));
        }
    }
    for (stage, command, stage_config) in stages {
        if cli.stage.as_ref().is_some_and(|only| only != &stage.name) {
            continue;
        }
        log::info!("stage {} ({})", stage.name, stage.command);
        let ctx = Context {
            base: config.out.clone(),
            out: config.out.join(&stage.name),
            seed: Some(seed),
            variant: cli.variant,
        };
        run_command(command, &ctx, &stage_config)?;
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    if cli.command == Command::Pipeline {
        return pipeline(cli);
    }
    if cli.stage.is_some() {
        return Err(CliError::validation("--stage only applies to `pipeline`"));
    }
    let config = require(&cli.config, "config")?;
    let ctx = Context {
        base: PathBuf::from("."),
        out: require(&cli.out, "out")?.to_path_buf(),
        seed: cli.seed,
        variant: cli.variant,
    };
    commands::thread_cap()?;
    run_command(cli.command, &ctx, config)
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
