//! The drag optimization loop.
//!
//! A [`Session`] inverts the input image to `t_edit`, then alternates a
//! motion-supervision update of the latent with point tracking. Tracking
//! compares the current features against the input image rotated by the
//! handle's drag angle about the rotation axis, re-inverted and re-featurized.
//! Rotated references are cached per angle bin.

mod adam;
mod config;
pub mod loss;
pub mod tracking;

use std::collections::HashMap;
use std::ops::ControlFlow;
use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use config::{DragConfig, EngineOverrides, EngineParams};
pub use tracking::RotatedReference;

use crate::codec::{LatentCodec, PixelCodec};
use crate::diffusion::{ddim_timesteps, Ddim, Denoiser, LatentCode, Tensor, ZeroNoiseDenoiser};
use crate::error::{Error, Result};
use crate::features::{sample_feature, FeatureBackend, FeatureMap, ReferenceBackend};
use crate::geometry::{
    compute_rotation_angle, rotate_image, rotate_point, select_rotation_axis, AngleRad, Point2,
};
use crate::image::Image;

/// Pluggable model pieces a session runs on.
#[derive(Clone)]
pub struct Components {
    pub denoiser: Arc<dyn Denoiser>,
    pub backend: Arc<dyn FeatureBackend>,
    pub codec: Arc<dyn LatentCodec>,
    pub ddim: Ddim,
}

impl Components {
    /// Analytic stack: zero-noise denoiser, reference features, pixel codec.
    pub fn reference() -> Self {
        Self {
            denoiser: Arc::new(ZeroNoiseDenoiser),
            backend: Arc::new(ReferenceBackend::default()),
            codec: Arc::new(PixelCodec),
            ddim: Ddim::default(),
        }
    }
}

impl std::fmt::Debug for Components {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Components")
            .field("denoiser", &self.denoiser.name())
            .field("backend", &self.backend.name())
            .field("codec", &self.codec.name())
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingState {
    pub handles: Vec<Point2>,
    pub axis: Point2,
    pub angles: Vec<AngleRad>,
    pub step: usize,
}

/// Progress record emitted once per optimization step (and once at start).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub handle_positions: Vec<Point2>,
    pub mean_dist_to_target: f64,
    pub angle_used: Vec<AngleRad>,
    /// Whether every rotated reference this step came from the cache.
    pub cache_hit: bool,
    /// Handles whose angle was undefined and tracked unrotated this step.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub angle_fallback: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    Converged,
    MaxSteps,
    Aborted,
}

/// Wall-clock seconds spent per phase.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub inversion: f64,
    pub motion_supervision: f64,
    pub tracking: f64,
    pub rotated_inversion: f64,
    pub denoise: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: usize,
    pub misses: usize,
    pub bins: Vec<i64>,
}

#[derive(Debug, Clone)]
pub struct DragResult {
    /// Edited image; absent when the run aborted.
    pub image: Option<Image>,
    pub trajectory: Vec<StepReport>,
    pub stop_reason: StopReason,
    pub failure: Option<String>,
    pub timing: PhaseTiming,
}

impl DragResult {
    pub fn final_report(&self) -> &StepReport {
        self.trajectory.last().expect("trajectory is never empty")
    }
}

/// Everything needed to reproduce or audit a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetadata {
    pub params: EngineParams,
    pub prompt: String,
    pub denoiser: String,
    pub backend: String,
    pub codec: String,
    /// Rotated references are inverted and featurized with the same
    /// denoiser instance as the input image.
    pub rotated_reference_denoiser: String,
    pub axis: Point2,
    pub sources: Vec<Point2>,
    pub targets: Vec<Point2>,
    pub stop_reason: Option<StopReason>,
    pub failure: Option<String>,
    pub steps: usize,
    pub final_handles: Vec<Point2>,
    pub final_distances: Vec<f64>,
    pub angles_used: Vec<Vec<AngleRad>>,
    pub cache: CacheStats,
    pub timing: PhaseTiming,
}

/// Loss value with its gradient on the current latent.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub loss: f64,
    pub motion: f64,
    pub preservation: f64,
    pub grad: Tensor,
}

pub struct Session {
    config: DragConfig,
    parts: Components,
    latent: LatentCode,
    original: LatentCode,
    /// One denoising step of the original inverted latent.
    original_prev: LatentCode,
    prev_t: usize,
    /// Latent cells outside the editable mask.
    preserve: Array2<bool>,
    feature_scale: f64,
    adam: Adam,
    state: TrackingState,
    frozen: Vec<bool>,
    cache: HashMap<i64, RotatedReference>,
    cache_stats: CacheStats,
    pending_tracking: bool,
    last_cache_hit: bool,
    last_fallback: Vec<usize>,
    stopped: Option<StopReason>,
    failure: Option<String>,
    trajectory: Vec<StepReport>,
    timing: PhaseTiming,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("parts", &self.parts)
            .field("state", &self.state)
            .field("stopped", &self.stopped)
            .finish_non_exhaustive()
    }
}

impl Session {
    /// Inverts the image, selects the rotation axis and places handles on
    /// the sources.
    pub fn new(config: DragConfig, parts: Components) -> Result<Self> {
        config.validate()?;
        let p = &config.params;
        let scale = parts.codec.scale().max(1);

        let started = Instant::now();
        let clean = LatentCode::clean(parts.codec.encode(&config.image)?);
        let original = parts.ddim.invert(
            &clean,
            p.t_edit,
            parts.denoiser.as_ref(),
            &config.prompt,
            p.n_ddim_steps,
        )?;
        let grid = ddim_timesteps(p.t_edit, p.n_ddim_steps)?;
        let prev_t = grid[grid.len() - 2];
        let original_prev =
            parts
                .ddim
                .denoise_step(&original, prev_t, parts.denoiser.as_ref(), &config.prompt)?;
        let inversion = started.elapsed().as_secs_f64();

        let axis = match select_rotation_axis(&config.sources, &config.targets, &config.mask) {
            Ok(a) => a,
            Err(Error::EmptyMaskLine) => config
                .mask
                .centroid()
                .unwrap_or_else(|| config.image.center()),
            Err(e) => return Err(e),
        };
        let small = config.mask.downsample(scale);
        let (_, lh, lw) = original.dim();
        let preserve = Array2::from_shape_fn((lh, lw), |(y, x)| {
            !(y < small.height() && x < small.width() && small.get(x, y))
        });

        let n = config.sources.len();
        let frozen = (0..n)
            .map(|i| config.sources[i].distance(config.targets[i]) < p.stop_dist)
            .collect();
        let state = TrackingState {
            handles: config.sources.clone(),
            axis,
            angles: vec![AngleRad::ZERO; n],
            step: 0,
        };
        let adam = Adam::new(p.lr, original.dim());
        let mut session = Self {
            latent: original.clone(),
            original,
            original_prev,
            prev_t,
            preserve,
            feature_scale: 1.0 / scale as f64,
            adam,
            state,
            frozen,
            cache: HashMap::new(),
            cache_stats: CacheStats::default(),
            pending_tracking: false,
            last_cache_hit: false,
            last_fallback: Vec::new(),
            stopped: None,
            failure: None,
            trajectory: Vec::new(),
            timing: PhaseTiming {
                inversion,
                ..PhaseTiming::default()
            },
            config,
            parts,
        };
        if session.is_converged() {
            session.stopped = Some(StopReason::Converged);
        }
        Ok(session)
    }

    pub fn config(&self) -> &DragConfig {
        &self.config
    }

    pub fn state(&self) -> &TrackingState {
        &self.state
    }

    pub fn latent(&self) -> &LatentCode {
        &self.latent
    }

    pub fn original_latent(&self) -> &LatentCode {
        &self.original
    }

    pub fn stop_reason(&self) -> Option<StopReason> {
        self.stopped
    }

    pub fn trajectory(&self) -> &[StepReport] {
        &self.trajectory
    }

    pub fn cache_stats(&self) -> &CacheStats {
        &self.cache_stats
    }

    /// Cells of the latent grid the preservation term covers.
    pub fn preserve_mask(&self) -> &Array2<bool> {
        &self.preserve
    }

    /// Overwrites the latent being optimized; the optimizer state is kept.
    pub fn set_latent(&mut self, data: Tensor) -> Result<()> {
        if data.dim() != self.latent.dim() {
            return Err(Error::ShapeMismatch {
                expected: self.latent.dim(),
                got: data.dim(),
            });
        }
        self.latent.data = data;
        Ok(())
    }

    /// Moves handles directly; used by tests that probe tracking in isolation.
    pub fn set_handles(&mut self, handles: Vec<Point2>) -> Result<()> {
        if handles.len() != self.state.handles.len() {
            return Err(Error::InvalidConfig("handle count mismatch".into()));
        }
        self.state.handles = handles;
        self.refresh_frozen();
        Ok(())
    }

    pub fn distances(&self) -> Vec<f64> {
        self.state
            .handles
            .iter()
            .zip(&self.config.targets)
            .map(|(h, t)| h.distance(*t))
            .collect()
    }

    pub fn mean_distance(&self) -> f64 {
        let d = self.distances();
        d.iter().sum::<f64>() / d.len() as f64
    }

    /// Every handle is strictly closer than `stop_dist` to its target.
    pub fn is_converged(&self) -> bool {
        self.distances()
            .iter()
            .all(|&d| d < self.config.params.stop_dist)
    }

    fn refresh_frozen(&mut self) {
        let stop = self.config.params.stop_dist;
        self.frozen = self.distances().iter().map(|&d| d < stop).collect();
    }

    /// Features of `latent` in image coordinates.
    pub fn features_of(&self, latent: &LatentCode) -> Result<FeatureMap> {
        Ok(self
            .parts
            .backend
            .extract(latent, self.parts.denoiser.as_ref(), &self.config.prompt)?
            .with_scale(self.feature_scale))
    }

    /// Motion supervision plus preservation at the current latent.
    pub fn motion_loss(&self) -> Result<LossEval> {
        let p = &self.config.params;
        let denoiser = self.parts.denoiser.as_ref();
        let prompt = self.config.prompt.as_str();

        let fm = self.features_of(&self.latent)?;
        let active: Vec<bool> = self.frozen.iter().map(|f| !f).collect();
        let (motion, fgrad) = loss::motion_supervision(
            &fm,
            &self.state.handles,
            &self.config.targets,
            &active,
            p.r1,
        )?;
        let mut grad =
            self.parts
                .backend
                .backprop(&self.latent, denoiser, prompt, &fgrad.with_scale(1.0))?;

        let mut preservation = 0.0;
        if p.lambda_mask > 0.0 {
            let current_prev =
                self.parts
                    .ddim
                    .denoise_step(&self.latent, self.prev_t, denoiser, prompt)?;
            let (value, cot) = loss::preservation(
                &current_prev.data,
                &self.original_prev.data,
                &self.preserve,
                p.lambda_mask,
            );
            preservation = value;
            grad += &self.parts.ddim.denoise_step_vjp(
                &self.latent,
                self.prev_t,
                denoiser,
                prompt,
                &cot,
            )?;
            // Cells sitting exactly on the kink of the L1 term take the
            // minimal-norm subgradient: the penalty absorbs up to
            // lambda * |d step / d z| of the motion pull. The slope is read
            // off a VJP with an indicator cotangent, exact for denoisers
            // whose step Jacobian is diagonal.
            let kinks = Zip::indexed(&current_prev.data)
                .and(&self.original_prev.data)
                .map_collect(|(_, y, x), a, b| self.preserve[[y, x]] && a == b);
            if kinks.iter().any(|&k| k) {
                let indicator = kinks.mapv(|k| if k { 1.0 } else { 0.0 });
                let slope = self.parts.ddim.denoise_step_vjp(
                    &self.latent,
                    self.prev_t,
                    denoiser,
                    prompt,
                    &indicator,
                )?;
                Zip::from(&mut grad)
                    .and(&kinks)
                    .and(&slope)
                    .for_each(|g, &k, &j| {
                        if k {
                            let room = p.lambda_mask * j.abs();
                            *g = g.signum() * (g.abs() - room).max(0.0);
                        }
                    });
            }
        }
        Ok(LossEval {
            loss: motion + preservation,
            motion,
            preservation,
            grad,
        })
    }

    /// One Adam update of the whole latent against [`Session::motion_loss`].
    pub fn optimize_step(&mut self) -> Result<StepReport> {
        if self.stopped.is_some() {
            return Err(Error::SessionStopped);
        }
        let started = Instant::now();
        let step = self.state.step + 1;
        let eval = match self.motion_loss() {
            Ok(e) => e,
            Err(e) => return Err(self.abort(e)),
        };
        if !eval.loss.is_finite() || eval.grad.iter().any(|g| !g.is_finite()) {
            return Err(self.abort(Error::NonFiniteLoss { step }));
        }
        self.adam.step(&mut self.latent.data, &eval.grad);
        self.state.step = step;
        self.pending_tracking = true;
        self.timing.motion_supervision += started.elapsed().as_secs_f64();
        Ok(self.report(eval.loss))
    }

    fn abort(&mut self, e: Error) -> Error {
        self.stopped = Some(StopReason::Aborted);
        self.failure = Some(e.to_string());
        e
    }

    fn report(&self, loss: f64) -> StepReport {
        StepReport {
            step: self.state.step,
            loss,
            handle_positions: self.state.handles.clone(),
            mean_dist_to_target: self.mean_distance(),
            angle_used: self.state.angles.clone(),
            cache_hit: self.last_cache_hit,
            angle_fallback: self.last_fallback.clone(),
        }
    }

    /// Rotated reference for angle bin `key`, built on first use.
    pub fn rotated_reference(&mut self, key: i64) -> Result<(&RotatedReference, bool)> {
        let hit = self.cache.contains_key(&key);
        if hit {
            self.cache_stats.hits += 1;
        } else {
            let started = Instant::now();
            let built = self.build_reference(key)?;
            self.cache.insert(key, built);
            self.cache_stats.misses += 1;
            self.cache_stats.bins.push(key);
            self.timing.rotated_inversion += started.elapsed().as_secs_f64();
        }
        Ok((&self.cache[&key], hit))
    }

    fn build_reference(&self, key: i64) -> Result<RotatedReference> {
        let p = &self.config.params;
        let angle = tracking::bin_angle(key, p.angle_bin);
        let rotated = rotate_image(&self.config.image, angle);
        let clean = LatentCode::clean(self.parts.codec.encode(&rotated)?);
        let rotated_latent = self.parts.ddim.invert(
            &clean,
            p.t_edit,
            self.parts.denoiser.as_ref(),
            &self.config.prompt,
            p.n_ddim_steps,
        )?;
        let features = self.features_of(&rotated_latent)?;
        let center = self.config.image.center();
        let rotated_sources = self
            .config
            .sources
            .iter()
            .map(|&s| rotate_point(s, center, angle))
            .collect();
        Ok(RotatedReference {
            angle_key: key,
            angle,
            rotated_latent,
            rotated_sources,
            features,
        })
    }

    /// Relocates every moving handle by nearest-neighbour search against its
    /// rotated template.
    pub fn track_points(&mut self) -> Result<TrackingState> {
        if !self.pending_tracking {
            return Err(Error::TrackingNotReady);
        }
        let started = Instant::now();
        let current = self.features_of(&self.latent)?;
        let p = self.config.params.clone();
        let axis = self.state.axis;
        let mut all_hit = true;
        let mut fallback = Vec::new();

        for i in 0..self.state.handles.len() {
            if self.frozen[i] {
                continue;
            }
            let handle = self.state.handles[i];
            let source = self.config.sources[i];
            let angle = if p.rotation_tracking {
                match compute_rotation_angle(source, handle, axis) {
                    Ok(a) => Some(a),
                    Err(Error::DegenerateAxis) => None,
                    Err(e) => return Err(e),
                }
            } else {
                Some(AngleRad::ZERO)
            };
            let mut key = angle.map_or(0, |a| tracking::angle_key(a, p.angle_bin));
            let mut template = {
                let (reference, hit) = self.rotated_reference(key)?;
                all_hit &= hit;
                reference.template(i)
            };
            if angle.is_none() || template.is_err() {
                // undefined angle, or the rotated source left the frame
                fallback.push(i);
                key = 0;
                let (reference, hit) = self.rotated_reference(0)?;
                all_hit &= hit;
                template = reference.template(i);
            }
            let template = template?;
            self.state.angles[i] = tracking::bin_angle(key, p.angle_bin);
            self.state.handles[i] = tracking::nearest_neighbor(&current, &template, handle, p.r2)?;
        }

        self.refresh_frozen();
        self.pending_tracking = false;
        self.last_cache_hit = all_hit;
        self.last_fallback = fallback;
        self.timing.tracking += started.elapsed().as_secs_f64();
        Ok(self.state.clone())
    }

    /// Template vector of handle `i` at angle `angle`, as tracking uses it.
    pub fn template_for(&mut self, i: usize, angle: AngleRad) -> Result<Vec<f64>> {
        let key = tracking::angle_key(angle, self.config.params.angle_bin);
        let (reference, _) = self.rotated_reference(key)?;
        reference.template(i)
    }

    /// Runs to convergence or the step limit, then denoises the result.
    pub fn run(&mut self) -> Result<DragResult> {
        self.run_with(|_| ControlFlow::Continue(()))
    }

    /// As [`Session::run`], reporting each step to `observer`; breaking
    /// aborts the run.
    pub fn run_with(
        &mut self,
        mut observer: impl FnMut(&StepReport) -> ControlFlow<()>,
    ) -> Result<DragResult> {
        if self.trajectory.is_empty() {
            let loss = if self.stopped.is_some() {
                0.0
            } else {
                match self.motion_loss() {
                    Ok(e) => e.loss,
                    Err(Error::AllHandlesConverged) => 0.0,
                    Err(e) => return Ok(self.aborted(e)),
                }
            };
            let initial = self.report(loss);
            self.trajectory.push(initial);
            if observer(self.trajectory.last().unwrap()).is_break() {
                return Ok(self.cancelled());
            }
        }
        while self.stopped.is_none() {
            if self.is_converged() {
                self.stopped = Some(StopReason::Converged);
                break;
            }
            if self.state.step >= self.config.params.max_steps {
                self.stopped = Some(StopReason::MaxSteps);
                break;
            }
            let mut report = match self.optimize_step() {
                Ok(r) => r,
                Err(e) => return Ok(self.aborted(e)),
            };
            if let Err(e) = self.track_points() {
                return Ok(self.aborted(e));
            }
            report.handle_positions = self.state.handles.clone();
            report.mean_dist_to_target = self.mean_distance();
            report.angle_used = self.state.angles.clone();
            report.cache_hit = self.last_cache_hit;
            report.angle_fallback = self.last_fallback.clone();
            self.trajectory.push(report);
            if observer(self.trajectory.last().unwrap()).is_break() {
                return Ok(self.cancelled());
            }
        }
        if self.stopped == Some(StopReason::Aborted) {
            let msg = self.failure.clone().unwrap_or_default();
            return Ok(self.aborted_with(msg));
        }

        let started = Instant::now();
        let clean = match self.parts.ddim.denoise(
            &self.latent,
            self.parts.denoiser.as_ref(),
            &self.config.prompt,
            self.config.params.n_ddim_steps,
        ) {
            Ok(c) => c,
            Err(e) => return Ok(self.aborted(e)),
        };
        let image = match self.parts.codec.decode(&clean.data) {
            Ok(i) => i,
            Err(e) => return Ok(self.aborted(e)),
        };
        self.timing.denoise += started.elapsed().as_secs_f64();
        Ok(DragResult {
            image: Some(image),
            trajectory: self.trajectory.clone(),
            stop_reason: self.stopped.expect("loop exits stopped"),
            failure: None,
            timing: self.timing.clone(),
        })
    }

    fn aborted(&mut self, e: Error) -> DragResult {
        let _ = self.abort(e);
        let msg = self.failure.clone().unwrap_or_default();
        self.aborted_with(msg)
    }

    fn cancelled(&mut self) -> DragResult {
        self.stopped = Some(StopReason::Aborted);
        self.failure = Some("cancelled".into());
        self.aborted_with("cancelled".into())
    }

    fn aborted_with(&self, msg: String) -> DragResult {
        if self.trajectory.is_empty() {
            // keep the trajectory nonempty even when the first loss fails
            let mut r = self.report(0.0);
            r.loss = 0.0;
            return DragResult {
                image: None,
                trajectory: vec![r],
                stop_reason: StopReason::Aborted,
                failure: Some(msg),
                timing: self.timing.clone(),
            };
        }
        DragResult {
            image: None,
            trajectory: self.trajectory.clone(),
            stop_reason: StopReason::Aborted,
            failure: Some(msg),
            timing: self.timing.clone(),
        }
    }

    pub fn metadata(&self) -> RunMetadata {
        RunMetadata {
            params: self.config.params.clone(),
            prompt: self.config.prompt.clone(),
            denoiser: self.parts.denoiser.name().to_string(),
            backend: self.parts.backend.name().to_string(),
            codec: self.parts.codec.name().to_string(),
            rotated_reference_denoiser: self.parts.denoiser.name().to_string(),
            axis: self.state.axis,
            sources: self.config.sources.clone(),
            targets: self.config.targets.clone(),
            stop_reason: self.stopped,
            failure: self.failure.clone(),
            steps: self.state.step,
            final_handles: self.state.handles.clone(),
            final_distances: self.distances(),
            angles_used: self
                .trajectory
                .iter()
                .map(|r| r.angle_used.clone())
                .collect(),
            cache: self.cache_stats.clone(),
            timing: self.timing.clone(),
        }
    }
}

/// Sampled feature of `latent` at `p`, using the session's feature stack.
pub fn feature_at(session: &Session, latent: &LatentCode, p: Point2) -> Result<Vec<f64>> {
    sample_feature(&session.features_of(latent)?, p)
}
