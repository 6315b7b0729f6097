//! `rotdrag` command-line front end.
//!
//! Every flag also has a key in the JSON file passed with `--config`; a flag
//! given on the command line wins over the file, and the file wins over the
//! built-in default. Paths inside the file are relative to the file.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
pub mod options;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rotdrag_core::{AffineCategory, Error};
use serde::{Deserialize, Serialize};

pub use crate::commands::run;
pub use crate::options::FileOptions;

#[derive(Debug, Parser)]
#[command(
    name = "rotdrag",
    version,
    about = "Rotation-aware point-based image editing"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one drag edit from a case file.
    Edit(EditArgs),
    /// Score a feature backend on single-transform homography estimation.
    BenchAffine(AffineArgs),
    /// Run every case file in a directory.
    BenchDrag(DragArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    #[default]
    Reference,
    UnetAdapter,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON options file.
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<std::path::PathBuf>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct EngineArgs {
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub r1: Option<usize>,
    #[arg(long)]
    pub r2: Option<usize>,
    /// Weight of the preservation term outside the mask.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Arrival distance in pixels.
    #[arg(long)]
    pub stop_dist: Option<f64>,
    /// Width of the rotated-reference cache bins, radians.
    #[arg(long)]
    pub angle_bin: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct EditArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub engine: EngineArgs,
    /// Print progress records to stdout as the run goes.
    #[arg(long)]
    pub follow: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct AffineArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Directory of source images (PNG or JPEG).
    #[arg(long)]
    pub images: Option<std::path::PathBuf>,
    /// Comma-separated subset of scaling, rotation, perspective, translation.
    #[arg(long, value_delimiter = ',')]
    pub categories: Option<Vec<AffineCategory>>,
    /// Cases per category.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Keypoints per side of the matching grid.
    #[arg(long)]
    pub keypoint_grid: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct DragArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub engine: EngineArgs,
    /// Directory of case files.
    #[arg(long)]
    pub cases: Option<std::path::PathBuf>,
    /// Worker threads; 0 uses one per core.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub addr: Option<std::net::SocketAddr>,
    /// Where sessions, jobs and blobs are stored.
    #[arg(long)]
    pub data_dir: Option<std::path::PathBuf>,
    #[arg(long)]
    pub max_upload_bytes: Option<usize>,
}

/// A message and the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Parse { .. }
            | Error::Io { .. }
            | Error::InvalidConfig(_)
            | Error::EmptyBenchmark
            | Error::BackendUnavailable(_)
            | Error::Image(_) => Self::usage(e.to_string()),
            other => Self::runtime(other.to_string()),
        }
    }
}
