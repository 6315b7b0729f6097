//! Dense feature maps and the backends that produce them.
//!
//! [`ReferenceBackend`] computes analytic multi-scale features directly from
//! the latent. They are linear in the latent, so the backward pass is the
//! exact adjoint of the forward filters. The smoothed channels are isotropic;
//! the derivative channels rotate with the content, which makes the features
//! deliberately sensitive to in-plane rotation.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};

use crate::diffusion::{Denoiser, LatentCode, Tensor};
use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::image::{bilinear_taps, sample_plane};

/// Per-pixel feature tensor `(channels, height, width)`.
///
/// `scale` is the ratio of feature resolution to image resolution: an image
/// point `p` is sampled at `p * scale` in feature pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Array3<f64>,
    pub scale: f64,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>, scale: f64) -> Self {
        Self { data, scale }
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    /// Whether the image point `p` can be sampled.
    pub fn contains(&self, p: Point2) -> bool {
        let q = p.scale(self.scale);
        q.is_finite()
            && q.x >= 0.0
            && q.y >= 0.0
            && q.x <= (self.width() - 1) as f64
            && q.y <= (self.height() - 1) as f64
    }

    fn check(&self, p: Point2) -> Result<Point2> {
        if !self.contains(p) {
            return Err(Error::OutOfBounds {
                x: p.x,
                y: p.y,
                width: self.width(),
                height: self.height(),
            });
        }
        Ok(p.scale(self.scale))
    }
}

/// Bilinear subpixel sample of every channel at the image point `p`.
pub fn sample_feature(fm: &FeatureMap, p: Point2) -> Result<Vec<f64>> {
    let q = fm.check(p)?;
    Ok(fm
        .data
        .axis_iter(Axis(0))
        .map(|plane| sample_plane(plane, q.x, q.y))
        .collect())
}

/// Adds `weights[c]` times the bilinear sampling stencil at `p` into `grad`;
/// the adjoint of [`sample_feature`].
pub fn scatter_feature(grad: &mut FeatureMap, p: Point2, weights: &[f64]) -> Result<()> {
    let q = grad.check(p)?;
    let (_, h, w) = grad.data.dim();
    let taps = bilinear_taps(w, h, q.x, q.y);
    for (c, &wc) in weights.iter().enumerate() {
        for &(r, col, t) in &taps {
            grad.data[[c, r, col]] += wc * t;
        }
    }
    Ok(())
}

/// L1 distance between two feature vectors.
pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Bilinear resize with corner alignment; updates `scale` to match.
pub fn upsample_features(fm: &FeatureMap, target_h: usize, target_w: usize) -> Result<FeatureMap> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::InvalidConfig(
            "upsample target must be positive".into(),
        ));
    }
    let (c, h, w) = fm.data.dim();
    if (h, w) == (target_h, target_w) {
        return Ok(fm.clone());
    }
    let ratio = |src: usize, dst: usize| {
        if dst > 1 && src > 1 {
            (src - 1) as f64 / (dst - 1) as f64
        } else {
            src as f64 / dst as f64
        }
    };
    let (ry, rx) = (ratio(h, target_h), ratio(w, target_w));
    let mut out = Array3::zeros((c, target_h, target_w));
    for ch in 0..c {
        let plane = fm.data.index_axis(Axis(0), ch);
        for y in 0..target_h {
            for x in 0..target_w {
                out[[ch, y, x]] = sample_plane(plane, x as f64 * rx, y as f64 * ry);
            }
        }
    }
    Ok(FeatureMap::new(out, fm.scale / rx))
}

/// Source of dense features for tracking and motion supervision.
pub trait FeatureBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Features of `latent` at its timestep, at latent resolution with
    /// `scale == 1` relative to the latent grid.
    fn extract(
        &self,
        latent: &LatentCode,
        denoiser: &dyn Denoiser,
        prompt: &str,
    ) -> Result<FeatureMap>;

    /// Pulls a gradient on the feature map back onto the latent.
    fn backprop(
        &self,
        latent: &LatentCode,
        denoiser: &dyn Denoiser,
        prompt: &str,
        grad: &FeatureMap,
    ) -> Result<Tensor>;
}

/// Smoothing scales of the reference features, in latent pixels.
pub const REFERENCE_SIGMAS: [f64; 3] = [1.0, 2.0, 4.0];
/// Scale of the derivative channels.
pub const DERIVATIVE_SIGMA: f64 = 2.0;

/// Feature channels produced per latent channel.
pub const REFERENCE_CHANNELS_PER_INPUT: usize = REFERENCE_SIGMAS.len() + 2;

/// Analytic multi-scale features; needs no network and is exactly linear.
#[derive(Debug, Clone)]
pub struct ReferenceBackend {
    smooth: Vec<Kernel>,
    deriv_smooth: Kernel,
    deriv: Kernel,
}

impl Default for ReferenceBackend {
    fn default() -> Self {
        Self {
            smooth: REFERENCE_SIGMAS
                .iter()
                .map(|&s| Kernel::gaussian(s))
                .collect(),
            deriv_smooth: Kernel::gaussian(DERIVATIVE_SIGMA),
            deriv: Kernel::gaussian_derivative(DERIVATIVE_SIGMA),
        }
    }
}

impl ReferenceBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// Channel layout per input channel: smoothed at each sigma, then the
    /// x and y derivatives.
    pub fn features(&self, input: &Array3<f64>) -> FeatureMap {
        let (c, h, w) = input.dim();
        let per = REFERENCE_CHANNELS_PER_INPUT;
        let mut out = Array3::zeros((c * per, h, w));
        for ch in 0..c {
            let plane = input.index_axis(Axis(0), ch);
            for (i, k) in self.smooth.iter().enumerate() {
                out.index_axis_mut(Axis(0), ch * per + i)
                    .assign(&separable(plane, k, k));
            }
            let n = self.smooth.len();
            out.index_axis_mut(Axis(0), ch * per + n).assign(&separable(
                plane,
                &self.deriv,
                &self.deriv_smooth,
            ));
            out.index_axis_mut(Axis(0), ch * per + n + 1)
                .assign(&separable(plane, &self.deriv_smooth, &self.deriv));
        }
        FeatureMap::new(out, 1.0)
    }

    /// Adjoint of [`ReferenceBackend::features`].
    pub fn features_adjoint(&self, grad: &FeatureMap) -> Array3<f64> {
        let (fc, h, w) = grad.data.dim();
        let per = REFERENCE_CHANNELS_PER_INPUT;
        let c = fc / per;
        let mut out = Array3::zeros((c, h, w));
        for ch in 0..c {
            let mut acc = Array2::zeros((h, w));
            let g = |i: usize| grad.data.index_axis(Axis(0), ch * per + i);
            for (i, k) in self.smooth.iter().enumerate() {
                acc += &separable_adjoint(g(i), k, k);
            }
            let n = self.smooth.len();
            acc += &separable_adjoint(g(n), &self.deriv, &self.deriv_smooth);
            acc += &separable_adjoint(g(n + 1), &self.deriv_smooth, &self.deriv);
            out.index_axis_mut(Axis(0), ch).assign(&acc);
        }
        out
    }
}

impl FeatureBackend for ReferenceBackend {
    fn name(&self) -> &str {
        "reference"
    }

    fn extract(&self, latent: &LatentCode, _: &dyn Denoiser, _: &str) -> Result<FeatureMap> {
        Ok(self.features(&latent.data))
    }

    fn backprop(
        &self,
        _: &LatentCode,
        _: &dyn Denoiser,
        _: &str,
        grad: &FeatureMap,
    ) -> Result<Tensor> {
        Ok(self.features_adjoint(grad))
    }
}

/// Reference features of a latent or image tensor.
pub fn extract_reference_features(input: &LatentCode) -> FeatureMap {
    ReferenceBackend::default().features(&input.data)
}

/// Symmetric 1-D filter taps over offsets `-radius..=radius`.
#[derive(Debug, Clone)]
struct Kernel {
    taps: Vec<f64>,
    radius: isize,
}

impl Kernel {
    fn gaussian(sigma: f64) -> Self {
        let radius = (3.0 * sigma).ceil() as isize;
        let raw: Vec<f64> = (-radius..=radius)
            .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let sum: f64 = raw.iter().sum();
        Self {
            taps: raw.into_iter().map(|v| v / sum).collect(),
            radius,
        }
    }

    /// Derivative-of-Gaussian, scaled to return the exact slope of a ramp.
    fn gaussian_derivative(sigma: f64) -> Self {
        let g = Self::gaussian(sigma);
        let moment: f64 = (-g.radius..=g.radius)
            .zip(&g.taps)
            .map(|(k, w)| (k * k) as f64 * w)
            .sum();
        Self {
            taps: (-g.radius..=g.radius)
                .zip(&g.taps)
                .map(|(k, w)| k as f64 * w / moment)
                .collect(),
            radius: g.radius,
        }
    }
}

fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// `out[y, x] = sum_{j,i} ky[j] kx[i] in[clamp(y+j), clamp(x+i)]`.
fn separable(plane: ArrayView2<'_, f64>, kx: &Kernel, ky: &Kernel) -> Array2<f64> {
    let (h, w) = plane.dim();
    let mut tmp = Array2::zeros((h, w));
    for y in 0..h {
        let row = plane.row(y);
        for x in 0..w {
            let mut acc = 0.0;
            for (t, wt) in kx.taps.iter().enumerate() {
                acc += wt * row[clamp_index(x as isize + t as isize - kx.radius, w)];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for (t, wt) in ky.taps.iter().enumerate() {
            let src = clamp_index(y as isize + t as isize - ky.radius, h);
            let mut dst = out.slice_mut(s![y, ..]);
            dst.scaled_add(*wt, &tmp.row(src));
        }
    }
    out
}

fn separable_adjoint(grad: ArrayView2<'_, f64>, kx: &Kernel, ky: &Kernel) -> Array2<f64> {
    let (h, w) = grad.dim();
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for (t, wt) in ky.taps.iter().enumerate() {
            let src = clamp_index(y as isize + t as isize - ky.radius, h);
            let mut dst = tmp.slice_mut(s![src, ..]);
            dst.scaled_add(*wt, &grad.row(y));
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let g = tmp[[y, x]];
            if g == 0.0 {
                continue;
            }
            for (t, wt) in kx.taps.iter().enumerate() {
                out[[y, clamp_index(x as isize + t as isize - kx.radius, w)]] += wt * g;
            }
        }
    }
    out
}
