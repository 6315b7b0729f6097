//! Config-file options and their merge with flags.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use rotdrag_core::harness::{CurationOptions, ParamRanges};
use rotdrag_core::{AffineCategory, EngineOverrides, Error};
use serde::{Deserialize, Serialize};

use crate::{
    AffineArgs, BackendKind, CommonArgs, DragArgs, EditArgs, EngineArgs, Failure, ServeArgs,
};

pub const DEFAULT_OUT: &str = "rotdrag-out";
pub const DEFAULT_COUNT: usize = 25;
pub const DEFAULT_KEYPOINT_GRID: usize = 8;
pub const DEFAULT_ADDR: &str = "127.0.0.1:8080";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AffineFile {
    pub images: Option<PathBuf>,
    pub categories: Option<Vec<AffineCategory>>,
    pub count: Option<usize>,
    pub keypoint_grid: Option<usize>,
    /// Keypoint distance from the crop border, pixels.
    pub margin: Option<f64>,
    pub prompt: Option<String>,
    pub ranges: Option<ParamRanges>,
    pub curation: Option<CurationOptions>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DragFile {
    pub cases: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeFile {
    pub addr: Option<SocketAddr>,
    pub data_dir: Option<PathBuf>,
    pub max_upload_bytes: Option<usize>,
}

/// Keys read from `--config`. For `edit` the same file is also the case
/// file, so keys this struct does not know are left alone.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FileOptions {
    pub out: Option<PathBuf>,
    pub backend: Option<BackendKind>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub follow: Option<bool>,
    pub engine: EngineOverrides,
    pub affine: AffineFile,
    pub drag: DragFile,
    pub serve: ServeFile,
}

impl FileOptions {
    /// Reads `path`; a missing file or bad JSON is a usage error naming the
    /// path and, for JSON, the line and column.
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut opts: Self = serde_json::from_str(&text).map_err(|e| {
            Failure::from(Error::Parse {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
        })?;
        opts.rebase(path.parent().unwrap_or(Path::new("")));
        Ok(opts)
    }

    fn rebase(&mut self, dir: &Path) {
        for p in [
            &mut self.out,
            &mut self.affine.images,
            &mut self.drag.cases,
            &mut self.serve.data_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }

    pub fn from_common(common: &CommonArgs) -> Result<Self, Failure> {
        match &common.config {
            Some(path) => Self::load(path),
            None => Ok(Self::default()),
        }
    }
}

impl EngineArgs {
    pub fn overrides(&self) -> EngineOverrides {
        EngineOverrides {
            r1: self.r1,
            r2: self.r2,
            lambda_mask: self.lambda,
            lr: self.lr,
            max_steps: self.max_steps,
            stop_dist: self.stop_dist,
            angle_bin: self.angle_bin,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shared {
    pub out: PathBuf,
    pub backend: BackendKind,
}

fn shared(common: &CommonArgs, file: &FileOptions) -> Shared {
    Shared {
        out: common
            .out
            .clone()
            .or_else(|| file.out.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
        backend: common.backend.or(file.backend).unwrap_or_default(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditOptions {
    pub shared: Shared,
    /// Flag overrides; the case file's own `engine` section sits below them.
    pub engine: EngineOverrides,
    pub follow: bool,
}

pub fn resolve_edit(args: &EditArgs, file: &FileOptions) -> EditOptions {
    EditOptions {
        shared: shared(&args.common, file),
        engine: args.engine.overrides(),
        follow: args.follow || file.follow.unwrap_or(false),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineOptions {
    pub shared: Shared,
    pub images: Option<PathBuf>,
    pub categories: Vec<AffineCategory>,
    pub count: usize,
    pub seed: u64,
    pub keypoint_grid: usize,
    pub margin: f64,
    pub prompt: String,
    pub ranges: ParamRanges,
    pub curation: CurationOptions,
}

pub fn resolve_affine(args: &AffineArgs, file: &FileOptions) -> AffineOptions {
    let f = &file.affine;
    let eval = rotdrag_core::harness::EvalOptions::default();
    AffineOptions {
        shared: shared(&args.common, file),
        images: args.images.clone().or_else(|| f.images.clone()),
        categories: args
            .categories
            .clone()
            .or_else(|| f.categories.clone())
            .unwrap_or_else(|| AffineCategory::ALL.to_vec()),
        count: args.count.or(f.count).unwrap_or(DEFAULT_COUNT),
        seed: args.seed.or(file.seed).unwrap_or(0),
        keypoint_grid: args
            .keypoint_grid
            .or(f.keypoint_grid)
            .unwrap_or(DEFAULT_KEYPOINT_GRID),
        margin: f.margin.unwrap_or(eval.margin),
        prompt: f.prompt.clone().unwrap_or_default(),
        ranges: f.ranges.unwrap_or_default(),
        curation: f.curation.unwrap_or_default(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DragOptions {
    pub shared: Shared,
    pub cases: Option<PathBuf>,
    pub workers: usize,
    pub engine: EngineOverrides,
}

pub fn resolve_drag(args: &DragArgs, file: &FileOptions) -> DragOptions {
    DragOptions {
        shared: shared(&args.common, file),
        cases: args.cases.clone().or_else(|| file.drag.cases.clone()),
        workers: args.workers.or(file.workers).unwrap_or(0),
        engine: args.engine.overrides().over(&file.engine),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServeOptions {
    pub backend: BackendKind,
    pub addr: SocketAddr,
    pub service: rotdrag_service::ServiceConfig,
}

pub fn resolve_serve(args: &ServeArgs, file: &FileOptions) -> ServeOptions {
    let base = rotdrag_service::ServiceConfig::default();
    ServeOptions {
        backend: shared(&args.common, file).backend,
        addr: args
            .addr
            .or(file.serve.addr)
            .unwrap_or_else(|| DEFAULT_ADDR.parse().expect("valid default address")),
        service: rotdrag_service::ServiceConfig {
            data_dir: args
                .data_dir
                .clone()
                .or_else(|| file.serve.data_dir.clone())
                .unwrap_or(base.data_dir),
            max_upload_bytes: args
                .max_upload_bytes
                .or(file.serve.max_upload_bytes)
                .unwrap_or(base.max_upload_bytes),
        },
    }
}
