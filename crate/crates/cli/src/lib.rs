//! Command-line pipeline for residual sense induction experiments.
//!
//! `acros <subcommand> --config run.toml` runs one stage of the pipeline
//! inside the run directory (`paths.out`, or `--out`):
//!
//! ```text
//! data/         synthetic corpus, vocabularies and evaluation sets
//! checkpoints/  base.ckpt, acros.ckpt, backpack-<variant>.ckpt, adapted.ckpt
//! tables/       one metric table per subcommand
//! manifest/     <subcommand>.json: config snapshot, hashes, tables, metrics
//! report.txt    written by `report`
//! ```
//!
//! Passing a manifest to `--config` replays its configuration and seed.
//! Invalid configuration exits with status 2, any later failure with 1.

pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod report;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand as ClapSubcommand};

use crate::config::ExperimentConfig;
use crate::manifest::{hash_files, ExperimentManifest, TOOL_VERSION};
use crate::pipeline::{Outcome, RunContext, Subcommand};

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or flags; exit status 2.
    Config(String),
    /// Failure while running a stage; exit status 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "invalid config: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<acros_core::Error> for CliError {
    fn from(e: acros_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Writes `text`, creating parent directories.
pub fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

#[derive(Debug, Parser)]
#[command(name = "acros", version, about = "Residual sense induction experiments on a toy corpus")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Experiment config (TOML) or a manifest JSON to replay.
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Run directory; overrides `paths.out`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Root seed; overrides `run.seed`.
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Suppress progress messages.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, ClapSubcommand)]
pub enum Command {
    /// Generate the synthetic data (unless `paths.data` is set) and pretrain the base model.
    TrainBase(CommonArgs),
    /// Train the residual sense pathway on the frozen base.
    Induce(CommonArgs),
    /// Convert the base to Backpack heads under every configured variant.
    ConvertBackpack(CommonArgs),
    /// Singular-value spectrum of base hidden states.
    DiagnoseSvd(CommonArgs),
    /// Gloss-matching word sense disambiguation with controls.
    EvalWsd(CommonArgs),
    /// Analytic sense-boost steering under every selector plus the dense control.
    EvalSteer(CommonArgs),
    /// Contrastive adaptation to the cipher language.
    Adapt(CommonArgs),
    /// Bidirectional retrieval and target perplexity before and after adaptation.
    EvalRetrieval(CommonArgs),
    /// Compose report.txt from the manifests in the run directory.
    Report(CommonArgs),
}

impl Command {
    pub fn split(&self) -> (Subcommand, &CommonArgs) {
        match self {
            Command::TrainBase(a) => (Subcommand::TrainBase, a),
            Command::Induce(a) => (Subcommand::Induce, a),
            Command::ConvertBackpack(a) => (Subcommand::ConvertBackpack, a),
            Command::DiagnoseSvd(a) => (Subcommand::DiagnoseSvd, a),
            Command::EvalWsd(a) => (Subcommand::EvalWsd, a),
            Command::EvalSteer(a) => (Subcommand::EvalSteer, a),
            Command::Adapt(a) => (Subcommand::Adapt, a),
            Command::EvalRetrieval(a) => (Subcommand::EvalRetrieval, a),
            Command::Report(a) => (Subcommand::Report, a),
        }
    }
}

/// Loads a TOML config or a manifest's config snapshot, applies flag
/// overrides and validates.
pub fn resolve_config(path: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = if path.extension().is_some_and(|e| e == "json") {
        let m = ExperimentManifest::load(path).map_err(|e| CliError::Config(e.to_string()))?;
        let mut cfg = ExperimentConfig::parse(&m.config)?;
        cfg.run.seed = m.seed;
        cfg
    } else {
        ExperimentConfig::load(path)?
    };
    if let Some(o) = out {
        cfg.paths.out = o.to_path_buf();
    }
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn context(args: &CommonArgs) -> Result<RunContext, CliError> {
    let cfg = resolve_config(&args.config, args.out.as_deref(), args.seed)?;
    Ok(RunContext { out: cfg.paths.out.clone(), cfg, quiet: args.quiet })
}

/// Runs one subcommand and writes its tables and manifest.
pub fn execute(cmd: Subcommand, ctx: &RunContext) -> Result<ExperimentManifest, CliError> {
    let start = Instant::now();
    std::fs::create_dir_all(ctx.out.join("checkpoints"))?;
    let outcome: Outcome = match cmd {
        Subcommand::TrainBase => pipeline::train_base_cmd(ctx),
        Subcommand::Induce => pipeline::induce_cmd(ctx),
        Subcommand::ConvertBackpack => pipeline::convert_backpack_cmd(ctx),
        Subcommand::DiagnoseSvd => pipeline::diagnose_svd_cmd(ctx),
        Subcommand::EvalWsd => pipeline::eval_wsd_cmd(ctx),
        Subcommand::EvalSteer => pipeline::eval_steer_cmd(ctx),
        Subcommand::Adapt => pipeline::adapt_cmd(ctx),
        Subcommand::EvalRetrieval => pipeline::eval_retrieval_cmd(ctx),
        Subcommand::Report => pipeline::report_cmd(ctx),
    }?;
    let mut artifacts = outcome.artifacts.clone();
    for (name, text) in &outcome.tables {
        let p = ctx.table_path(name);
        write_file(&p, text)?;
        artifacts.push(p);
        if !ctx.quiet {
            eprint!("{text}");
        }
    }
    let manifest = ExperimentManifest {
        tool: TOOL_VERSION.to_string(),
        subcommand: cmd.name().to_string(),
        seed: ctx.seed(),
        config: ctx.cfg.to_toml(),
        inputs: hash_files(&ctx.out, &outcome.inputs)?,
        artifacts: hash_files(&ctx.out, &artifacts)?,
        tables: outcome.tables,
        metrics: outcome.metrics.into_iter().filter(|(_, v)| v.is_finite()).collect(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    manifest.save(&ctx.manifest_path(cmd))?;
    Ok(manifest)
}

/// Every subcommand in pipeline order.
pub fn run_pipeline(ctx: &RunContext) -> Result<Vec<ExperimentManifest>, CliError> {
    Subcommand::ALL.iter().map(|&c| execute(c, ctx)).collect()
}

/// Parses `argv`, runs the subcommand and returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let (cmd, args) = cli.command.split();
    match context(args).and_then(|ctx| execute(cmd, &ctx)) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("acros {}: {e}", cmd.name());
            e.exit_code()
        }
    }
}
