//! Rotation-aware point-based image editing over diffusion latents.
//!
//! The engine inverts an image into a diffusion latent, then drags handle
//! points toward targets by optimizing the latent against a feature-space
//! motion loss. Handles are re-located after every update by matching
//! against features of the input image rotated by the current drag angle,
//! which keeps tracking reliable for in-plane rotations.
//!
//! The [`harness`] module measures how well a feature backend survives
//! single-category planar transforms and runs drag benchmarks.

pub mod adapter;
pub mod case;
pub mod codec;
pub mod diffusion;
pub mod engine;
pub mod error;
pub mod features;
pub mod geometry;
pub mod harness;
pub mod image;
pub mod synth;

pub use crate::codec::{LatentCodec, PixelCodec};
pub use crate::diffusion::{
    Ddim, Denoiser, LatentCode, LinearNoiseDenoiser, NoiseSchedule, Tensor, ZeroNoiseDenoiser,
};
pub use crate::engine::{
    Components, DragConfig, DragResult, EngineOverrides, EngineParams, RunMetadata, Session,
    StepReport, StopReason, TrackingState,
};
pub use crate::error::{Error, Result};
pub use crate::features::{FeatureBackend, FeatureMap, ReferenceBackend};
pub use crate::geometry::{AffineCategory, AngleRad, Homography, Point2};
pub use crate::image::{BinaryMask, Image};
