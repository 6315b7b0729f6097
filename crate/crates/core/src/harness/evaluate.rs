//! Homography accuracy of a feature backend over curated affine cases.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, LatentCode, Tensor};
use crate::engine::Components;
use crate::error::{Error, Result};
use crate::features::{FeatureBackend, FeatureMap};
use crate::geometry::{corner_error, is_corner_correct, AffineCategory};
use crate::harness::affine::{AffineCase, AffineParams};
use crate::harness::estimate::{estimate_homography, keypoint_grid};
use crate::image::Image;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Keypoints per side of the uniform grid.
    pub keypoint_grid: usize,
    /// Keypoint distance from the crop border, pixels.
    pub margin: f64,
    pub seed: u64,
    pub prompt: String,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            keypoint_grid: 8,
            margin: 6.0,
            seed: 0,
            prompt: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub index: usize,
    pub category: AffineCategory,
    pub params: AffineParams,
    pub corner_error: Option<f64>,
    pub correct: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub category: AffineCategory,
    pub correct: usize,
    pub total: usize,
}

impl CategoryScore {
    /// Fraction correct, or `None` for an empty category.
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub method: String,
    pub threshold_px: f64,
    pub scores: Vec<CategoryScore>,
    pub cases: Vec<CaseOutcome>,
}

impl BenchReport {
    pub fn score(&self, category: AffineCategory) -> CategoryScore {
        self.scores
            .iter()
            .copied()
            .find(|s| s.category == category)
            .unwrap_or(CategoryScore {
                category,
                correct: 0,
                total: 0,
            })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Accuracy table with one row per method and one column per category.
pub fn render_table(reports: &[BenchReport]) -> String {
    let width = reports
        .iter()
        .map(|r| r.method.len())
        .chain(["Method".len()])
        .max()
        .unwrap_or(6);
    let mut out = String::new();
    let _ = write!(out, "{:<width$}", "Method");
    for c in AffineCategory::ALL {
        let _ = write!(out, " | {:>11}", c.name());
    }
    out.push('\n');
    let _ = writeln!(out, "{}", "-".repeat(width + 4 * 14));
    for r in reports {
        let _ = write!(out, "{:<width$}", r.method);
        for c in AffineCategory::ALL {
            match r.score(c).accuracy() {
                Some(a) => {
                    let _ = write!(out, " | {:>11.1}", 100.0 * a);
                }
                None => {
                    let _ = write!(out, " | {:>11}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

fn features(parts: &Components, image: &Image, prompt: &str) -> Result<FeatureMap> {
    let latent = LatentCode::clean(parts.codec.encode(image)?);
    let fm = parts
        .backend
        .extract(&latent, parts.denoiser.as_ref(), prompt)?;
    Ok(fm.with_scale(1.0 / parts.codec.scale() as f64))
}

fn score_case(parts: &Components, case: &AffineCase, opts: &EvalOptions) -> Result<f64> {
    let a = features(parts, &case.reference, &opts.prompt)?;
    let b = features(parts, &case.warped, &opts.prompt)?;
    let (w, h) = (case.reference.width(), case.reference.height());
    let kps = keypoint_grid(w, h, opts.keypoint_grid, opts.margin);
    let est = estimate_homography(&a, &b, &kps, opts.seed)?;
    corner_error(&est, &case.h_gt, w, h)
}

/// Scores every case; a case that fails to estimate counts as incorrect.
pub fn evaluate_method(
    cases: &[AffineCase],
    parts: &Components,
    method: impl Into<String>,
    opts: &EvalOptions,
) -> Result<BenchReport> {
    if cases.is_empty() {
        return Err(Error::EmptyBenchmark);
    }
    let mut tally: BTreeMap<AffineCategory, (usize, usize)> = BTreeMap::new();
    let mut outcomes = Vec::with_capacity(cases.len());
    for (index, case) in cases.iter().enumerate() {
        let (err, failure) = match score_case(parts, case, opts) {
            Ok(e) => (Some(e), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let correct = err.is_some_and(is_corner_correct);
        let t = tally.entry(case.category).or_default();
        t.0 += correct as usize;
        t.1 += 1;
        outcomes.push(CaseOutcome {
            index,
            category: case.category,
            params: case.params,
            corner_error: err,
            correct,
            failure,
        });
    }
    Ok(BenchReport {
        method: method.into(),
        threshold_px: crate::geometry::CORNER_CORRECT_PX,
        scores: tally
            .into_iter()
            .map(|(category, (correct, total))| CategoryScore {
                category,
                correct,
                total,
            })
            .collect(),
        cases: outcomes,
    })
}

/// Wraps a backend and shuffles feature vectors across pixel positions with a
/// fixed permutation per map size, destroying spatial correspondence. Used as
/// a chance-level floor.
pub struct ScrambledBackend<B> {
    inner: B,
    seed: u64,
}

impl<B: FeatureBackend> ScrambledBackend<B> {
    pub fn new(inner: B, seed: u64) -> Self {
        Self { inner, seed }
    }

    fn permutation(&self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed ^ n as u64));
        idx
    }
}

impl<B: FeatureBackend> FeatureBackend for ScrambledBackend<B> {
    fn name(&self) -> &str {
        "scrambled"
    }

    fn extract(
        &self,
        latent: &LatentCode,
        denoiser: &dyn Denoiser,
        prompt: &str,
    ) -> Result<FeatureMap> {
        let fm = self.inner.extract(latent, denoiser, prompt)?;
        let (c, h, w) = fm.data.dim();
        let perm = self.permutation(h * w);
        let data = Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
            let k = perm[y * w + x];
            fm.data[[ch, k / w, k % w]]
        });
        Ok(FeatureMap::new(data, fm.scale))
    }

    fn backprop(
        &self,
        latent: &LatentCode,
        denoiser: &dyn Denoiser,
        prompt: &str,
        grad: &FeatureMap,
    ) -> Result<Tensor> {
        let (c, h, w) = grad.data.dim();
        let perm = self.permutation(h * w);
        let mut back = Array3::zeros((c, h, w));
        for y in 0..h {
            for x in 0..w {
                let k = perm[y * w + x];
                for ch in 0..c {
                    back[[ch, k / w, k % w]] = grad.data[[ch, y, x]];
                }
            }
        }
        self.inner
            .backprop(latent, denoiser, prompt, &FeatureMap::new(back, grad.scale))
    }
}
