//! `dvp`: bank management, generation, refinement, evaluation and the HTTP
//! service.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dvp_core::error::EngineError;

use config::EngineArgs;

#[derive(Debug, Parser)]
#[command(name = "dvp", version, about = "Theme-specific image generation with dynamic visual prompts")]
pub struct Cli {
    /// Config file [default: ./dvp.toml when present]
    #[arg(long, global = true, env = "DVP_CONFIG")]
    pub config: Option<PathBuf>,
    /// Print machine-readable JSON [default: false]
    #[arg(long, global = true)]
    pub json: bool,
    /// More log output on stderr; repeat for more [default: warnings only]
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Manage theme banks
    #[command(subcommand)]
    Bank(BankCommand),
    /// Generate one image from a prompt
    Generate(GenerateArgs),
    /// Multi-turn sessions with pins and reruns
    #[command(subcommand)]
    Refine(RefineCommand),
    /// Run the evaluation protocol over themes, prompts and seeds
    Evaluate(EvaluateArgs),
    /// Start the HTTP service
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum BankCommand {
    /// Hash the images in DIR and write the bank manifest
    Ingest {
        /// Image directory
        dir: PathBuf,
        /// Theme name [default: directory name]
        #[arg(long)]
        theme: Option<String>,
    },
    /// Embed every bank image missing from the cache
    Index {
        dir: PathBuf,
        /// Use the deterministic offline backends [default: false]
        #[arg(long, env = "DVP_MOCK_BACKENDS", num_args = 0..=1, default_missing_value = "true",
              value_parser = clap::builder::BoolishValueParser::new(), value_name = "BOOL")]
        mock_backends: Option<bool>,
    },
    /// Check the manifest and cache against the files on disk
    Verify {
        dir: PathBuf,
        /// Use the deterministic offline backends [default: false]
        #[arg(long, env = "DVP_MOCK_BACKENDS", num_args = 0..=1, default_missing_value = "true",
              value_parser = clap::builder::BoolishValueParser::new(), value_name = "BOOL")]
        mock_backends: Option<bool>,
    },
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Bank directory, ingested on first use [default: none, required]
    #[arg(long)]
    pub bank: PathBuf,
    /// Text prompt [default: none, required]
    #[arg(long)]
    pub prompt: String,
    /// Comma-separated key elements, bypassing extraction [default: extracted]
    #[arg(long)]
    pub elements: Option<String>,
    /// Where run directories are written [default: runs]
    #[arg(long, env = "DVP_RUNS_DIR")]
    pub runs_dir: Option<PathBuf>,
    #[command(flatten)]
    pub engine: EngineArgs,
}

#[derive(Debug, Args)]
pub struct SessionDirs {
    /// Session store directory [default: sessions]
    #[arg(long, env = "DVP_SESSIONS_DIR")]
    pub sessions_dir: Option<PathBuf>,
    /// Where run directories are written [default: runs]
    #[arg(long, env = "DVP_RUNS_DIR")]
    pub runs_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum RefineCommand {
    /// Extract, match and store a new session
    New {
        /// Bank directory [default: none, required]
        #[arg(long)]
        bank: PathBuf,
        /// Text prompt [default: none, required]
        #[arg(long)]
        prompt: String,
        /// Comma-separated key elements, bypassing extraction [default: extracted]
        #[arg(long)]
        elements: Option<String>,
        #[command(flatten)]
        dirs: SessionDirs,
        #[command(flatten)]
        engine: EngineArgs,
    },
    /// Apply changes and run every arrangement
    Run {
        /// Session id
        session: String,
        /// Pin an image: ROW,COL=IMAGE_ID (unique id prefix accepted) [default: none]
        #[arg(long = "pin", value_name = "ROW,COL=ID")]
        pins: Vec<String>,
        /// Remove the pin at ROW,COL [default: none]
        #[arg(long = "unpin", value_name = "ROW,COL")]
        unpins: Vec<String>,
        /// Replace the prompt and re-extract [default: unchanged]
        #[arg(long)]
        prompt: Option<String>,
        /// Score weights TEXT,IMAGE,QUALITY [default: unchanged]
        #[arg(long)]
        weights: Option<String>,
        /// Generation seed [default: unchanged]
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        dirs: SessionDirs,
        /// Use the deterministic offline backends [default: false]
        #[arg(long, env = "DVP_MOCK_BACKENDS", num_args = 0..=1, default_missing_value = "true",
              value_parser = clap::builder::BoolishValueParser::new(), value_name = "BOOL")]
        mock_backends: Option<bool>,
    },
    /// Record a preferred arrangement for a past run
    Select {
        session: String,
        /// Run id [default: none, required]
        #[arg(long)]
        run: String,
        /// Arrangement id [default: none, required]
        #[arg(long)]
        arrangement: usize,
        #[command(flatten)]
        dirs: SessionDirs,
    },
    /// Print a session
    Show {
        session: String,
        #[command(flatten)]
        dirs: SessionDirs,
    },
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Theme bank and prompt file (one prompt per line): DIR=PROMPTS; repeatable [default: none, required]
    #[arg(long = "theme", value_name = "DIR=PROMPTS", required = true)]
    pub themes: Vec<String>,
    /// Comma-separated seeds [default: 0,1]
    #[arg(long)]
    pub seeds: Option<String>,
    /// Also write the report here [default: none]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Where run directories are written [default: runs]
    #[arg(long, env = "DVP_RUNS_DIR")]
    pub runs_dir: Option<PathBuf>,
    #[command(flatten)]
    pub engine: EngineArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Bind address [default: 127.0.0.1:8750]
    #[arg(long, env = "DVP_ADDR")]
    pub addr: Option<String>,
    /// Service state directory [default: dvp-data]
    #[arg(long, env = "DVP_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    /// Runs executing at once [default: 2]
    #[arg(long, env = "DVP_MAX_CONCURRENT_RUNS")]
    pub max_concurrent_runs: Option<usize>,
    /// Allowed browser origin [default: any]
    #[arg(long, env = "DVP_CORS_ORIGIN")]
    pub cors_origin: Option<String>,
    #[command(flatten)]
    pub engine: EngineArgs,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorReport {
    pub code: String,
    pub message: String,
    pub retryable: bool,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Domain(ErrorReport),
}

impl CliError {
    pub fn domain(code: &str, message: impl Into<String>) -> Self {
        CliError::Domain(ErrorReport {
            code: code.to_string(),
            message: message.into(),
            retryable: false,
        })
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        CliError::Domain(ErrorReport {
            code: e.code().to_string(),
            message: e.to_string(),
            retryable: e.is_retryable(),
        })
    }
}

impl From<dvp_core::error::BankError> for CliError {
    fn from(e: dvp_core::error::BankError) -> Self {
        EngineError::from(e).into()
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        EngineError::from(e).into()
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .init();

    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(CliError::Domain(report)) => {
            if cli.json {
                println!("{}", serde_json::json!({ "error": report }));
            } else {
                let hint = if report.retryable { " (retryable)" } else { "" };
                eprintln!("error[{}]: {}{hint}", report.code, report.message);
            }
            ExitCode::from(1)
        }
    }
}
