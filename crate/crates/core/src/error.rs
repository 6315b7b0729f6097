use std::path::PathBuf;

/// Errors produced by the editing engine and its evaluation harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("rotation axis coincides with a point; angle is undefined")]
    DegenerateAxis,
    #[error("perpendicular line through the first source point misses the mask")]
    EmptyMaskLine,
    #[error("point maps to infinity (homogeneous depth {0:e})")]
    PointAtInfinity(f64),
    #[error("homography is singular (det {0:e})")]
    SingularHomography(f64),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("timestep {t} outside [{lo}, {hi}]")]
    InvalidTimestep { t: usize, lo: usize, hi: usize },
    #[error("denoiser failure: {0}")]
    DenoiserFailure(String),
    #[error("point ({x}, {y}) lies outside the {width}x{height} sampling domain")]
    OutOfBounds {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("every handle has converged; motion loss is undefined")]
    AllHandlesConverged,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("point tracking requested before an optimization step")]
    TrackingNotReady,
    #[error("session has already stopped")]
    SessionStopped,
    #[error("no crop can contain the sampled transform after {attempts} attempts")]
    UnsatisfiableCrop { attempts: usize },
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("benchmark has no cases")]
    EmptyBenchmark,
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
