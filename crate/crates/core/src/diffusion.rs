//! Noise schedule, forward diffusion and deterministic DDIM inversion and
//! sampling over a pluggable noise predictor.

use ndarray::Array3;

use crate::error::{Error, Result};

pub type Tensor = Array3<f64>;

/// Cumulative signal coefficients `alpha_t` for `t = 1..=T`; `alpha_0 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
}

impl NoiseSchedule {
    pub const DEFAULT_TIMESTEPS: usize = 1000;

    /// Builds a schedule from explicit cumulative coefficients.
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::InvalidConfig("empty noise schedule".into()));
        }
        let mut prev = 1.0;
        for (i, &a) in alphas.iter().enumerate() {
            if !(a > 0.0 && a <= 1.0) || (i > 0 && a >= prev) {
                return Err(Error::InvalidConfig(format!(
                    "schedule must be strictly decreasing in (0, 1]; alpha_{} = {a}",
                    i + 1
                )));
            }
            prev = a;
        }
        Ok(Self { alphas })
    }

    /// Betas linear in their square root between `beta_start` and `beta_end`.
    pub fn scaled_linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps < 2 {
            return Err(Error::InvalidConfig(
                "schedule needs at least 2 timesteps".into(),
            ));
        }
        let (lo, hi) = (beta_start.sqrt(), beta_end.sqrt());
        let mut cum = 1.0;
        let alphas = (0..timesteps)
            .map(|i| {
                let b = lo + (hi - lo) * i as f64 / (timesteps - 1) as f64;
                cum *= 1.0 - b * b;
                cum
            })
            .collect();
        Self::from_alphas(alphas)
    }

    pub fn timesteps(&self) -> usize {
        self.alphas.len()
    }

    /// `alpha_t`, with `alpha_0 = 1`.
    pub fn alpha(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alphas[t - 1]
        }
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::scaled_linear(Self::DEFAULT_TIMESTEPS, 0.00085, 0.012)
            .expect("default schedule is valid")
    }
}

/// A spatial latent tensor `(channels, height, width)` at a diffusion timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub data: Tensor,
    pub timestep: usize,
}

impl LatentCode {
    pub fn new(data: Tensor, timestep: usize) -> Self {
        Self { data, timestep }
    }

    pub fn clean(data: Tensor) -> Self {
        Self::new(data, 0)
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Noise predictor driving DDIM sampling and inversion.
///
/// Implementations must be deterministic in `(latent, t, prompt)`.
pub trait Denoiser: Send + Sync {
    fn name(&self) -> &str;

    fn predict_noise(&self, latent: &LatentCode, t: usize, prompt: &str) -> Result<Tensor>;

    /// Vector-Jacobian product of [`Denoiser::predict_noise`] with respect to
    /// the latent, used to backpropagate the preservation term.
    fn noise_vjp(
        &self,
        latent: &LatentCode,
        t: usize,
        prompt: &str,
        cotangent: &Tensor,
    ) -> Result<Tensor>;
}

/// Predicts zero noise everywhere. DDIM steps become exact rescalings.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroNoiseDenoiser;

impl Denoiser for ZeroNoiseDenoiser {
    fn name(&self) -> &str {
        "zero-noise"
    }

    fn predict_noise(&self, latent: &LatentCode, _t: usize, _prompt: &str) -> Result<Tensor> {
        Ok(Tensor::zeros(latent.dim()))
    }

    fn noise_vjp(&self, latent: &LatentCode, _: usize, _: &str, _: &Tensor) -> Result<Tensor> {
        Ok(Tensor::zeros(latent.dim()))
    }
}

/// Predicts noise proportional to the latent, `gain * z`.
#[derive(Debug, Clone, Copy)]
pub struct LinearNoiseDenoiser {
    pub gain: f64,
}

impl Denoiser for LinearNoiseDenoiser {
    fn name(&self) -> &str {
        "linear-noise"
    }

    fn predict_noise(&self, latent: &LatentCode, _t: usize, _prompt: &str) -> Result<Tensor> {
        Ok(&latent.data * self.gain)
    }

    fn noise_vjp(&self, _: &LatentCode, _: usize, _: &str, cotangent: &Tensor) -> Result<Tensor> {
        Ok(cotangent * self.gain)
    }
}

pub fn forward_diffuse(
    schedule: &NoiseSchedule,
    x0: &LatentCode,
    t: usize,
    noise: &Tensor,
) -> Result<LatentCode> {
    if x0.timestep != 0 {
        return Err(Error::InvalidTimestep {
            t: x0.timestep,
            lo: 0,
            hi: 0,
        });
    }
    check_timestep(schedule, t, 1)?;
    check_shape(x0.dim(), noise.dim())?;
    let a = schedule.alpha(t);
    Ok(LatentCode::new(
        &x0.data * a.sqrt() + noise * (1.0 - a).sqrt(),
        t,
    ))
}

/// `n_steps + 1` uniformly spaced timesteps from 0 to `t_target` inclusive.
pub fn ddim_timesteps(t_target: usize, n_steps: usize) -> Result<Vec<usize>> {
    if n_steps == 0 || n_steps > t_target {
        return Err(Error::InvalidConfig(format!(
            "{n_steps} DDIM steps cannot span timesteps 0..={t_target}"
        )));
    }
    Ok((0..=n_steps)
        .map(|j| (j * t_target + n_steps / 2) / n_steps)
        .collect())
}

/// Deterministic DDIM transport between two timesteps given a noise estimate.
pub fn ddim_transfer(x: &Tensor, eps: &Tensor, alpha_from: f64, alpha_to: f64) -> Tensor {
    let (keep, mix) = transfer_coefficients(alpha_from, alpha_to);
    x * keep + eps * mix
}

fn transfer_coefficients(alpha_from: f64, alpha_to: f64) -> (f64, f64) {
    let keep = (alpha_to / alpha_from).sqrt();
    let mix = (1.0 - alpha_to).sqrt() - keep * (1.0 - alpha_from).sqrt();
    (keep, mix)
}

/// Deterministic DDIM sampler and inverter over a fixed schedule.
#[derive(Debug, Clone, Default)]
pub struct Ddim {
    pub schedule: NoiseSchedule,
}

impl Ddim {
    pub fn new(schedule: NoiseSchedule) -> Self {
        Self { schedule }
    }

    /// Runs the sampling trajectory backwards from a clean latent to
    /// `t_target`, evaluating the noise at the lower timestep of each step.
    pub fn invert(
        &self,
        x0: &LatentCode,
        t_target: usize,
        denoiser: &dyn Denoiser,
        prompt: &str,
        n_steps: usize,
    ) -> Result<LatentCode> {
        if x0.timestep != 0 {
            return Err(Error::InvalidTimestep {
                t: x0.timestep,
                lo: 0,
                hi: 0,
            });
        }
        check_timestep(&self.schedule, t_target, 1)?;
        let grid = ddim_timesteps(t_target, n_steps)?;
        let mut z = x0.clone();
        for pair in grid.windows(2) {
            let (from, to) = (pair[0], pair[1]);
            let eps = self.noise(denoiser, &z, from, prompt)?;
            z = LatentCode::new(
                ddim_transfer(
                    &z.data,
                    &eps,
                    self.schedule.alpha(from),
                    self.schedule.alpha(to),
                ),
                to,
            );
        }
        Ok(z)
    }

    /// Deterministic reverse trajectory from `z.timestep` to a clean latent.
    pub fn denoise(
        &self,
        z: &LatentCode,
        denoiser: &dyn Denoiser,
        prompt: &str,
        n_steps: usize,
    ) -> Result<LatentCode> {
        check_timestep(&self.schedule, z.timestep, 1)?;
        let grid = ddim_timesteps(z.timestep, n_steps)?;
        let mut z = z.clone();
        for pair in grid.windows(2).rev() {
            z = self.denoise_step(&z, pair[0], denoiser, prompt)?;
        }
        Ok(z)
    }

    /// One deterministic step from `z.timestep` down to `to`.
    pub fn denoise_step(
        &self,
        z: &LatentCode,
        to: usize,
        denoiser: &dyn Denoiser,
        prompt: &str,
    ) -> Result<LatentCode> {
        check_timestep(&self.schedule, z.timestep, 1)?;
        if to >= z.timestep {
            return Err(Error::InvalidTimestep {
                t: to,
                lo: 0,
                hi: z.timestep - 1,
            });
        }
        let eps = self.noise(denoiser, z, z.timestep, prompt)?;
        Ok(LatentCode::new(
            ddim_transfer(
                &z.data,
                &eps,
                self.schedule.alpha(z.timestep),
                self.schedule.alpha(to),
            ),
            to,
        ))
    }

    /// Vector-Jacobian product of [`Ddim::denoise_step`] with respect to `z`.
    pub fn denoise_step_vjp(
        &self,
        z: &LatentCode,
        to: usize,
        denoiser: &dyn Denoiser,
        prompt: &str,
        cotangent: &Tensor,
    ) -> Result<Tensor> {
        let (keep, mix) =
            transfer_coefficients(self.schedule.alpha(z.timestep), self.schedule.alpha(to));
        let through_eps = denoiser
            .noise_vjp(z, z.timestep, prompt, cotangent)
            .map_err(as_denoiser_failure)?;
        Ok(cotangent * keep + through_eps * mix)
    }

    fn noise(
        &self,
        denoiser: &dyn Denoiser,
        z: &LatentCode,
        t: usize,
        prompt: &str,
    ) -> Result<Tensor> {
        let eps = denoiser
            .predict_noise(z, t, prompt)
            .map_err(as_denoiser_failure)?;
        check_shape(z.dim(), eps.dim())?;
        if eps.iter().any(|v| !v.is_finite()) {
            return Err(Error::DenoiserFailure(format!(
                "{} produced non-finite noise at t={t}",
                denoiser.name()
            )));
        }
        Ok(eps)
    }
}

fn as_denoiser_failure(e: Error) -> Error {
    match e {
        Error::DenoiserFailure(_) => e,
        other => Error::DenoiserFailure(other.to_string()),
    }
}

fn check_timestep(schedule: &NoiseSchedule, t: usize, lo: usize) -> Result<()> {
    let hi = schedule.timesteps();
    if t < lo || t > hi {
        return Err(Error::InvalidTimestep { t, lo, hi });
    }
    Ok(())
}

fn check_shape(expected: (usize, usize, usize), got: (usize, usize, usize)) -> Result<()> {
    if expected != got {
        return Err(Error::ShapeMismatch { expected, got });
    }
    Ok(())
}
