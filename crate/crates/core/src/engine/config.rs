use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::image::{BinaryMask, Image};

/// Optimization and tracking hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineParams {
    /// Half-size of the motion-supervision patch, in pixels.
    pub r1: usize,
    /// Half-size of the tracking search window, in pixels.
    pub r2: usize,
    /// Weight of the outside-mask preservation term.
    pub lambda_mask: f64,
    /// Adam step size.
    pub lr: f64,
    pub max_steps: usize,
    /// A handle closer than this to its target, in pixels, has arrived.
    pub stop_dist: f64,
    /// Diffusion timestep the image is inverted to before editing.
    pub t_edit: usize,
    /// DDIM steps between the clean image and `t_edit`.
    pub n_ddim_steps: usize,
    /// Width of the angle bins that share one rotated reference, radians.
    pub angle_bin: f64,
    /// Use rotated references for tracking; when false every handle tracks
    /// against the unrotated source features.
    pub rotation_tracking: bool,
}

impl Default for EngineParams {
    fn default() -> Self {
        Self {
            r1: 1,
            r2: 3,
            lambda_mask: 0.1,
            lr: 0.01,
            max_steps: 160,
            stop_dist: 2.0,
            t_edit: 700,
            n_ddim_steps: 35,
            angle_bin: 1f64.to_radians(),
            rotation_tracking: true,
        }
    }
}

impl EngineParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.r1 < 1 || self.r2 < self.r1 {
            return bad(format!(
                "need r2 >= r1 >= 1, got r1={} r2={}",
                self.r1, self.r2
            ));
        }
        if !(self.lambda_mask >= 0.0 && self.lambda_mask.is_finite()) {
            return bad(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda_mask
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(self.stop_dist > 0.0 && self.stop_dist.is_finite()) {
            return bad(format!(
                "stop_dist must be positive, got {}",
                self.stop_dist
            ));
        }
        if !(self.angle_bin > 0.0 && self.angle_bin.is_finite()) {
            return bad(format!(
                "angle_bin must be positive, got {}",
                self.angle_bin
            ));
        }
        if self.n_ddim_steps == 0 || self.n_ddim_steps > self.t_edit {
            return bad(format!(
                "n_ddim_steps must be in 1..={}, got {}",
                self.t_edit, self.n_ddim_steps
            ));
        }
        Ok(())
    }
}

/// A partial set of hyperparameters, as read from a file or command line.
/// Unset fields leave the underlying value alone.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r1: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r2: Option<usize>,
    #[serde(alias = "lambda", skip_serializing_if = "Option::is_none")]
    pub lambda_mask: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_dist: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_edit: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_ddim_steps: Option<usize>,
    /// Radians.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub angle_bin: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rotation_tracking: Option<bool>,
}

impl EngineOverrides {
    pub fn apply(&self, params: &mut EngineParams) {
        macro_rules! take {
            ($($f:ident),*) => {$(
                if let Some(v) = self.$f {
                    params.$f = v;
                }
            )*};
        }
        take!(
            r1,
            r2,
            lambda_mask,
            lr,
            max_steps,
            stop_dist,
            t_edit,
            n_ddim_steps,
            angle_bin,
            rotation_tracking
        );
    }

    /// Fields set here win over those set in `base`.
    pub fn over(&self, base: &EngineOverrides) -> EngineOverrides {
        macro_rules! pick {
            ($($f:ident),*) => {
                EngineOverrides { $($f: self.$f.or(base.$f)),* }
            };
        }
        pick!(
            r1,
            r2,
            lambda_mask,
            lr,
            max_steps,
            stop_dist,
            t_edit,
            n_ddim_steps,
            angle_bin,
            rotation_tracking
        )
    }

    pub fn resolve(&self) -> EngineParams {
        let mut p = EngineParams::default();
        self.apply(&mut p);
        p
    }
}

/// One editing task.
#[derive(Debug, Clone)]
pub struct DragConfig {
    pub image: Image,
    pub sources: Vec<Point2>,
    pub targets: Vec<Point2>,
    pub mask: BinaryMask,
    pub prompt: String,
    pub params: EngineParams,
}

impl DragConfig {
    pub fn new(
        image: Image,
        sources: Vec<Point2>,
        targets: Vec<Point2>,
        mask: BinaryMask,
        prompt: impl Into<String>,
    ) -> Self {
        Self {
            image,
            sources,
            targets,
            mask,
            prompt: prompt.into(),
            params: EngineParams::default(),
        }
    }

    pub fn with_params(mut self, params: EngineParams) -> Self {
        self.params = params;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.image.is_empty() {
            return Err(Error::InvalidConfig("image is empty".into()));
        }
        if self.sources.is_empty() || self.sources.len() != self.targets.len() {
            return Err(Error::InvalidConfig(format!(
                "need matching nonempty point lists, got {} sources and {} targets",
                self.sources.len(),
                self.targets.len()
            )));
        }
        for p in self.sources.iter().chain(&self.targets) {
            if !self.image.contains(*p) {
                return Err(Error::InvalidConfig(format!(
                    "point {p} outside the {}x{} image",
                    self.image.width(),
                    self.image.height()
                )));
            }
        }
        if (self.mask.height(), self.mask.width()) != (self.image.height(), self.image.width()) {
            return Err(Error::InvalidConfig(format!(
                "mask is {}x{} but image is {}x{}",
                self.mask.width(),
                self.mask.height(),
                self.image.width(),
                self.image.height()
            )));
        }
        Ok(())
    }
}
