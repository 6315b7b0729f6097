//! Adapter contract for a real latent-diffusion UNet.
//!
//! No network runtime ships with this crate. A runtime implements
//! [`UnetRuntime`]; [`UnetAdapter`] turns it into a [`Denoiser`] and a
//! [`FeatureBackend`] that reads the third decoder upsampling block and
//! resizes it to latent resolution. Features are used raw.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use crate::diffusion::{Denoiser, LatentCode, Tensor};
use crate::error::{Error, Result};
use crate::features::{FeatureBackend, FeatureMap};

/// Environment variable naming the model-weights root.
pub const WEIGHTS_ENV: &str = "ROTDRAG_WEIGHTS";

/// Index of the decoder upsampling block whose output feeds tracking.
pub const FEATURE_BLOCK: usize = 3;

/// A differentiable UNet evaluation.
pub trait UnetRuntime: Send {
    fn predict_noise(&mut self, latent: &Tensor, t: usize, prompt: &str) -> Result<Tensor>;

    fn noise_vjp(
        &mut self,
        latent: &Tensor,
        t: usize,
        prompt: &str,
        cotangent: &Tensor,
    ) -> Result<Tensor>;

    /// Output of decoder upsampling block `block` (1-based) for one
    /// evaluation at timestep `t`, at the block's native resolution.
    fn up_block_features(
        &mut self,
        latent: &Tensor,
        t: usize,
        prompt: &str,
        block: usize,
    ) -> Result<Tensor>;

    /// Adjoint of [`UnetRuntime::up_block_features`].
    fn up_block_vjp(
        &mut self,
        latent: &Tensor,
        t: usize,
        prompt: &str,
        block: usize,
        cotangent: &Tensor,
    ) -> Result<Tensor>;

    /// Hook for per-image fine-tuning (for example LoRA) before editing.
    fn finetune(&mut self, _latent: &Tensor, _prompt: &str) -> Result<()> {
        Ok(())
    }
}

/// Shares one runtime between the denoiser and feature roles; calls are
/// serialized through a mutex.
#[derive(Clone)]
pub struct UnetAdapter {
    runtime: Arc<Mutex<dyn UnetRuntime>>,
}

impl std::fmt::Debug for UnetAdapter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UnetAdapter").finish_non_exhaustive()
    }
}

impl UnetAdapter {
    pub fn new(runtime: impl UnetRuntime + 'static) -> Self {
        Self {
            runtime: Arc::new(Mutex::new(runtime)),
        }
    }

    /// Resolves the weights root from the environment. Fails fast: this
    /// build links no UNet runtime, so even a valid root cannot be served.
    pub fn from_env() -> Result<Self> {
        let root = std::env::var_os(WEIGHTS_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| {
                Error::BackendUnavailable(format!(
                    "unet-adapter needs model weights; set {WEIGHTS_ENV} to the weights root"
                ))
            })?;
        Self::from_weights(&root)
    }

    pub fn from_weights(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::BackendUnavailable(format!(
                "model weights root {} does not exist",
                root.display()
            )));
        }
        Err(Error::BackendUnavailable(format!(
            "weights found at {} but no UNet runtime is linked into this build",
            root.display()
        )))
    }

    pub fn finetune(&self, latent: &LatentCode, prompt: &str) -> Result<()> {
        self.lock()?.finetune(&latent.data, prompt)
    }

    fn lock(&self) -> Result<std::sync::MutexGuard<'_, dyn UnetRuntime + 'static>> {
        self.runtime
            .lock()
            .map_err(|_| Error::DenoiserFailure("UNet runtime poisoned by a panic".into()))
    }
}

impl Denoiser for UnetAdapter {
    fn name(&self) -> &str {
        "unet-adapter"
    }

    fn predict_noise(&self, latent: &LatentCode, t: usize, prompt: &str) -> Result<Tensor> {
        self.lock()?.predict_noise(&latent.data, t, prompt)
    }

    fn noise_vjp(
        &self,
        latent: &LatentCode,
        t: usize,
        prompt: &str,
        cotangent: &Tensor,
    ) -> Result<Tensor> {
        self.lock()?.noise_vjp(&latent.data, t, prompt, cotangent)
    }
}

impl FeatureBackend for UnetAdapter {
    fn name(&self) -> &str {
        "unet-adapter"
    }

    fn extract(&self, latent: &LatentCode, _: &dyn Denoiser, prompt: &str) -> Result<FeatureMap> {
        let (_, h, w) = latent.dim();
        let raw =
            self.lock()?
                .up_block_features(&latent.data, latent.timestep, prompt, FEATURE_BLOCK)?;
        let fm = FeatureMap::new(raw, 1.0);
        Ok(crate::features::upsample_features(&fm, h, w)?.with_scale(1.0))
    }

    fn backprop(
        &self,
        latent: &LatentCode,
        _: &dyn Denoiser,
        prompt: &str,
        grad: &FeatureMap,
    ) -> Result<Tensor> {
        let mut rt = self.lock()?;
        let native = rt.up_block_features(&latent.data, latent.timestep, prompt, FEATURE_BLOCK)?;
        let (_, bh, bw) = native.dim();
        let pulled = resize_adjoint(&grad.data, bh, bw);
        rt.up_block_vjp(
            &latent.data,
            latent.timestep,
            prompt,
            FEATURE_BLOCK,
            &pulled,
        )
    }
}

/// Adjoint of the corner-aligned bilinear resize from `(bh, bw)` to the
/// gradient's spatial size.
fn resize_adjoint(grad: &Tensor, bh: usize, bw: usize) -> Tensor {
    let (c, h, w) = grad.dim();
    let ratio = |src: usize, dst: usize| {
        if dst > 1 && src > 1 {
            (src - 1) as f64 / (dst - 1) as f64
        } else {
            src as f64 / dst as f64
        }
    };
    let (ry, rx) = (ratio(bh, h), ratio(bw, w));
    let mut out = Tensor::zeros((c, bh, bw));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let g = grad[[ch, y, x]];
                for (r, col, t) in crate::image::bilinear_taps(bw, bh, x as f64 * rx, y as f64 * ry)
                {
                    out[[ch, r, col]] += g * t;
                }
            }
        }
    }
    out
}
