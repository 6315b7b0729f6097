//! Drag benchmark runner over case files.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::case::DragCase;
use crate::engine::{Components, DragResult, EngineOverrides, RunMetadata, Session, StopReason};
use crate::error::{Error, Result};

/// Writes `result.png` (when present), `trajectory.ndjson` and
/// `metadata.json` into `dir`.
pub fn write_run(dir: &Path, result: &DragResult, metadata: &RunMetadata) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if let Some(img) = &result.image {
        img.save_png(dir.join("result.png"))?;
    }
    let mut lines = String::new();
    for r in &result.trajectory {
        lines.push_str(&serde_json::to_string(r).expect("reports serialize"));
        lines.push('\n');
    }
    let path = dir.join("trajectory.ndjson");
    std::fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
    let path = dir.join("metadata.json");
    let text = serde_json::to_string_pretty(metadata).expect("metadata serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseRecord {
    pub index: usize,
    pub path: PathBuf,
    pub stop_reason: Option<StopReason>,
    pub steps: usize,
    pub final_mean_distance: Option<f64>,
    pub wall_time_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl CaseRecord {
    pub fn completed(&self) -> bool {
        matches!(
            self.stop_reason,
            Some(StopReason::Converged | StopReason::MaxSteps)
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DragSummary {
    pub cases: usize,
    pub completed: usize,
    pub failed: usize,
    pub converged: usize,
    /// Converged cases over all cases.
    pub convergence_rate: f64,
    /// Mean over completed cases of the final handle-to-target distance.
    pub mean_final_distance: Option<f64>,
    pub wall_time_s: f64,
    pub records: Vec<CaseRecord>,
}

pub struct DragRun {
    pub results: Vec<Option<DragResult>>,
    pub summary: DragSummary,
}

#[derive(Debug, Clone, Default)]
pub struct DragBenchOptions {
    pub overrides: EngineOverrides,
    /// Worker threads; 0 picks the rayon default.
    pub workers: usize,
    /// Where per-case outputs and `summary.json` go; nothing is written when
    /// unset.
    pub out_dir: Option<PathBuf>,
}

fn case_dir(out: &Path, index: usize, path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.join("cases").join(format!("{index:04}_{stem}"))
}

fn run_case(
    index: usize,
    path: &Path,
    opts: &DragBenchOptions,
    make: &(dyn Fn() -> Result<Components> + Sync),
) -> (CaseRecord, Option<DragResult>) {
    let started = Instant::now();
    let attempt = || -> Result<(DragResult, RunMetadata)> {
        let case = DragCase::load(path)?;
        let config = case.to_config(&opts.overrides)?;
        let mut session = Session::new(config, make()?)?;
        let result = session.run()?;
        Ok((result, session.metadata()))
    };
    let mut record = CaseRecord {
        index,
        path: path.to_path_buf(),
        stop_reason: None,
        steps: 0,
        final_mean_distance: None,
        wall_time_s: 0.0,
        failure: None,
    };
    let result = match attempt() {
        Ok((result, meta)) => {
            let last = result.final_report();
            record.stop_reason = Some(result.stop_reason);
            record.steps = last.step;
            record.final_mean_distance = Some(last.mean_dist_to_target);
            record.failure = result.failure.clone();
            if let Some(out) = &opts.out_dir {
                if let Err(e) = write_run(&case_dir(out, index, path), &result, &meta) {
                    record.failure = Some(e.to_string());
                }
            }
            Some(result)
        }
        Err(e) => {
            record.failure = Some(e.to_string());
            None
        }
    };
    record.wall_time_s = started.elapsed().as_secs_f64();
    (record, result)
}

/// Runs every case on a bounded worker pool. Per-case failures are recorded
/// and do not stop the run; results come back in input order.
pub fn run_drag_benchmark(
    cases: &[PathBuf],
    opts: &DragBenchOptions,
    make: &(dyn Fn() -> Result<Components> + Sync),
) -> Result<DragRun> {
    if cases.is_empty() {
        return Err(Error::EmptyBenchmark);
    }
    let started = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    let outcomes: Vec<(CaseRecord, Option<DragResult>)> = pool.install(|| {
        cases
            .par_iter()
            .enumerate()
            .map(|(i, p)| run_case(i, p, opts, make))
            .collect()
    });
    let (records, results): (Vec<_>, Vec<_>) = outcomes.into_iter().unzip();
    let completed: Vec<&CaseRecord> = records.iter().filter(|r| r.completed()).collect();
    let converged = records
        .iter()
        .filter(|r| r.stop_reason == Some(StopReason::Converged))
        .count();
    let mean_final_distance = (!completed.is_empty()).then(|| {
        completed
            .iter()
            .filter_map(|r| r.final_mean_distance)
            .sum::<f64>()
            / completed.len() as f64
    });
    let summary = DragSummary {
        cases: records.len(),
        completed: completed.len(),
        failed: records.len() - completed.len(),
        converged,
        convergence_rate: converged as f64 / records.len() as f64,
        mean_final_distance,
        wall_time_s: started.elapsed().as_secs_f64(),
        records,
    };
    if let Some(out) = &opts.out_dir {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let path = out.join("summary.json");
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(DragRun { results, summary })
}
