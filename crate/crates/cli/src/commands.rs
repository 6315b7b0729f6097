use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rotdrag_core::adapter::UnetAdapter;
use rotdrag_core::case::{discover_cases, DragCase};
use rotdrag_core::harness::{
    curate_affine_cases, evaluate_method, render_table, run_drag_benchmark, write_run,
    DragBenchOptions, EvalOptions,
};
use rotdrag_core::{Components, Error, Image, Session, StopReason};
use rotdrag_service::{AppState, JobState, ProgressRecord};

use crate::options::{resolve_affine, resolve_drag, resolve_edit, resolve_serve, FileOptions};
use crate::{AffineArgs, BackendKind, Command, DragArgs, EditArgs, Failure, ServeArgs};

/// Runs one parsed invocation. Output goes to stdout, diagnostics to stderr.
pub fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Edit(a) => edit(&a),
        Command::BenchAffine(a) => bench_affine(&a),
        Command::BenchDrag(a) => bench_drag(&a),
        Command::Serve(a) => serve(&a),
    }
}

pub(crate) fn components(backend: BackendKind) -> rotdrag_core::Result<Components> {
    match backend {
        BackendKind::Reference => Ok(Components::reference()),
        BackendKind::UnetAdapter => {
            let unet = UnetAdapter::from_env()?;
            Ok(Components {
                denoiser: Arc::new(unet.clone()),
                backend: Arc::new(unet),
                ..Components::reference()
            })
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::runtime(format!("{}: {e}", path.display()))
}

fn edit(args: &EditArgs) -> Result<(), Failure> {
    let Some(path) = &args.common.config else {
        return Err(Failure::usage("edit needs --config <case.json>"));
    };
    let case = DragCase::load(path)?;
    let opts = resolve_edit(args, &FileOptions::load(path)?);
    let config = case.to_config(&opts.engine)?;
    let parts = components(opts.shared.backend)?;
    let mut session = Session::new(config, parts).map_err(Failure::from)?;

    let stdout = std::io::stdout();
    let result = session
        .run_with(|r| {
            if opts.follow {
                let mut out = stdout.lock();
                let _ = out.write_all(ProgressRecord::Step(r.clone()).to_line().as_bytes());
                let _ = out.flush();
            }
            ControlFlow::Continue(())
        })
        .map_err(|e| Failure::runtime(e.to_string()))?;
    let meta = session.metadata();
    write_run(&opts.shared.out, &result, &meta).map_err(|e| Failure::runtime(e.to_string()))?;

    let last = result.final_report();
    if opts.follow {
        let end = ProgressRecord::End {
            state: if result.stop_reason == StopReason::Aborted {
                JobState::Failed
            } else {
                JobState::Done
            },
            stop_reason: Some(result.stop_reason),
            failure: result.failure.clone(),
        };
        print!("{}", end.to_line());
    } else {
        println!(
            "{:?} after {} steps, mean distance {:.3} px; wrote {}",
            result.stop_reason,
            last.step,
            last.mean_dist_to_target,
            opts.shared.out.display()
        );
    }
    match result.stop_reason {
        StopReason::Converged | StopReason::MaxSteps => Ok(()),
        StopReason::Aborted => Err(Failure::runtime(format!(
            "run aborted: {}",
            result.failure.unwrap_or_default()
        ))),
    }
}

fn load_images(dir: &Path) -> Result<Vec<Image>, Failure> {
    let entries =
        std::fs::read_dir(dir).map_err(|e| Failure::usage(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| Image::load(p).map_err(Failure::from))
        .collect()
}

fn bench_affine(args: &AffineArgs) -> Result<(), Failure> {
    let opts = resolve_affine(args, &FileOptions::from_common(&args.common)?);
    let Some(dir) = &opts.images else {
        return Err(Failure::usage("bench-affine needs --images <dir>"));
    };
    if opts.count == 0 || opts.categories.is_empty() {
        return Err(Error::EmptyBenchmark.into());
    }
    let images = load_images(dir)?;
    if images.is_empty() {
        return Err(Failure::usage(format!(
            "{}: {}",
            dir.display(),
            Error::EmptyBenchmark
        )));
    }
    let mut cases = Vec::new();
    for &category in &opts.categories {
        cases.extend(curate_affine_cases(
            &images,
            category,
            opts.count,
            opts.seed,
            &opts.ranges,
            &opts.curation,
        )?);
    }
    let parts = components(opts.shared.backend)?;
    let method = parts.backend.name().to_string();
    let eval = EvalOptions {
        keypoint_grid: opts.keypoint_grid,
        margin: opts.margin,
        seed: opts.seed,
        prompt: opts.prompt.clone(),
    };
    let report = evaluate_method(&cases, &parts, method, &eval)?;
    let table = render_table(std::slice::from_ref(&report));
    let out = &opts.shared.out;
    std::fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    let path = out.join("report.json");
    std::fs::write(&path, report.to_json()).map_err(|e| io_failure(&path, e))?;
    let path = out.join("table.txt");
    std::fs::write(&path, &table).map_err(|e| io_failure(&path, e))?;
    println!("{table}");
    Ok(())
}

fn bench_drag(args: &DragArgs) -> Result<(), Failure> {
    let opts = resolve_drag(args, &FileOptions::from_common(&args.common)?);
    let Some(dir) = &opts.cases else {
        return Err(Failure::usage("bench-drag needs --cases <dir>"));
    };
    let cases = discover_cases(dir)?;
    let backend = opts.shared.backend;
    let bench = DragBenchOptions {
        overrides: opts.engine.clone(),
        workers: opts.workers,
        out_dir: Some(opts.shared.out.clone()),
    };
    let run = run_drag_benchmark(&cases, &bench, &move || components(backend))?;
    let s = &run.summary;
    for r in &s.records {
        if let Some(f) = &r.failure {
            eprintln!("case {}: {f}", r.path.display());
        }
    }
    let mean = s
        .mean_final_distance
        .map(|d| format!("{d:.3} px"))
        .unwrap_or_else(|| "-".into());
    println!(
        "{} cases, {} completed, {} failed, convergence {:.1}%, mean final distance {mean}, {:.1} s",
        s.cases,
        s.completed,
        s.failed,
        100.0 * s.convergence_rate,
        s.wall_time_s
    );
    if s.completed == 0 {
        return Err(Failure::runtime("every case failed"));
    }
    Ok(())
}

fn serve(args: &ServeArgs) -> Result<(), Failure> {
    let opts = resolve_serve(args, &FileOptions::from_common(&args.common)?);
    let backend = opts.backend;
    // fail fast rather than on the first job
    components(backend)?;
    let state = AppState::open(opts.service.clone(), Arc::new(move || components(backend)))
        .map_err(|e| Failure::usage(format!("{}: {e}", opts.service.data_dir.display())))?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::runtime(e.to_string()))?;
    runtime
        .block_on(rotdrag_service::serve(state, opts.addr))
        .map_err(|e| Failure::runtime(format!("{}: {e}", opts.addr)))
}
