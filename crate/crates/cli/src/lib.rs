//! `ctevidence` command-line front end.
//!
//! [`dispatch`] parses arguments, runs one subcommand and maps the outcome
//! to an exit code: 0 on success, 1 for usage and configuration errors, 2
//! for runtime failures.

pub mod config;
pub mod manifest;

mod commands;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use ctevidence_core::agent::Mode;
use thiserror::Error;

pub use config::{load_config, ConfigError, PipelineConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{context}: {message}")]
    Runtime { context: String, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Runtime { .. } => 2,
        }
    }
}

pub(crate) fn runtime<E: std::fmt::Display>(
    context: impl Into<String>,
) -> impl FnOnce(E) -> CliError {
    let context = context.into();
    move |e| CliError::Runtime {
        context,
        message: e.to_string(),
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "ctevidence",
    version,
    about = "Evidence-driven chest CT report generation"
)]
pub struct Cli {
    /// Pipeline config JSON.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthetic phantom studies.
    #[command(subcommand)]
    Phantom(PhantomCmd),
    /// Pathology feature extraction.
    #[command(subcommand)]
    Features(FeaturesCmd),
    /// Reference index construction and queries.
    #[command(subcommand)]
    Index(IndexCmd),
    /// Snippet extraction and verification.
    #[command(subcommand)]
    Snippets(SnippetsCmd),
    /// Evidence-acquisition agent.
    #[command(subcommand)]
    Agent(AgentCmd),
    /// Cohort evaluation.
    #[command(subcommand)]
    Eval(EvalCmd),
}

#[derive(Debug, Subcommand)]
pub enum PhantomCmd {
    /// Render a phantom spec into a study directory.
    Make {
        #[arg(long, value_name = "FILE")]
        spec: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum FeaturesCmd {
    /// Write one FeatureVector JSON per registered tool.
    Extract {
        #[arg(long, value_name = "DIR")]
        study: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum IndexCmd {
    /// Join snippets with per-study features into an index JSONL file.
    Build {
        /// Snippet JSONL; may repeat.
        #[arg(long = "snippets", value_name = "FILE", required = true)]
        snippets: Vec<PathBuf>,
        /// Directory holding `<source_id>/<pathology>.json` feature files.
        #[arg(long, value_name = "DIR")]
        features_root: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Nearest reference entries for one FeatureVector.
    Query {
        /// Overrides the config's index.
        #[arg(long, value_name = "FILE")]
        index: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        features: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum SnippetsCmd {
    /// Extract pathology snippets from reports with the configured backend.
    Extract {
        /// JSONL of `{"source_id", "text"}`.
        #[arg(long, value_name = "FILE")]
        reports: PathBuf,
        /// Prompt set; defaults to every prompt set in the config.
        #[arg(long = "prompt-set", value_name = "FILE")]
        prompt_set: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Template-F1 of extracted snippets against labels.
    Verify {
        #[arg(long, value_name = "FILE")]
        snippets: PathBuf,
        /// JSONL of `{"source_id", "pathology", "present"}`.
        #[arg(long, value_name = "FILE")]
        labels: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum AgentCmd {
    /// Run the agent on one study.
    Run(AgentRunArgs),
}

#[derive(Debug, Args)]
pub struct AgentRunArgs {
    #[arg(long, value_name = "DIR")]
    pub study: PathBuf,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Mode,
    /// Draft report to verify; required in refine mode.
    #[arg(long, value_name = "FILE", required_if_eq("mode", "refine"))]
    pub draft: Option<PathBuf>,
    #[arg(long)]
    pub query: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
}

#[derive(Debug, Args)]
pub struct CohortArgs {
    /// JSONL of `{"study_dir", "gold_labels_path", "reference_report_path", "draft_path"?}`;
    /// defaults to the config's cohort manifest.
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum EvalCmd {
    /// Run the agent on every case and score the reports.
    Cohort(CohortArgs),
    /// Repeat the cohort evaluation for several k.
    Ksweep {
        #[command(flatten)]
        cohort: CohortArgs,
        #[arg(long, value_delimiter = ',', default_values_t = ctevidence_core::eval::DEFAULT_KS)]
        ks: Vec<usize>,
    },
    /// Macro-F1 change on the studies with the largest lung volumes.
    Sensitivity {
        #[command(flatten)]
        cohort: CohortArgs,
        #[arg(long, default_value_t = 0.10)]
        decile: f64,
    },
}

/// Run with process stdout and stderr.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    dispatch_to(args, &mut stdout.lock(), &mut stderr.lock())
}

pub fn dispatch_to<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    match commands::run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
