//! Evaluation harnesses: homography accuracy under single affine transforms,
//! and the drag benchmark runner.

pub mod affine;
pub mod drag;
pub mod estimate;
pub mod evaluate;

pub use affine::{
    curate_affine_cases, AffineCase, AffineParams, CurationOptions, ParamRanges, Range,
};
pub use drag::{run_drag_benchmark, write_run, CaseRecord, DragBenchOptions, DragRun, DragSummary};
pub use estimate::{estimate_homography, keypoint_grid};
pub use evaluate::{
    evaluate_method, render_table, BenchReport, CategoryScore, EvalOptions, ScrambledBackend,
};
