//! Feature matching and robust homography fitting.

use nalgebra::{DMatrix, Matrix3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{sample_feature, FeatureMap};
use crate::geometry::{apply_homography, Homography, Point2};

pub const RANSAC_ITERATIONS: usize = 2000;
pub const INLIER_PX: f64 = 3.0;

/// A keypoint in the first map and its best match in the second.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub from: Point2,
    pub to: Point2,
}

/// Exhaustive nearest neighbour (squared L2) of `template` over every pixel
/// of `fm`. Ties keep the first pixel in `(y, x)` order.
pub fn best_match(fm: &FeatureMap, template: &[f64]) -> Point2 {
    let (c, h, w) = fm.data.dim();
    let data = fm.data.as_slice().expect("feature maps are contiguous");
    let plane = h * w;
    let mut best = (f64::INFINITY, 0);
    let mut dist = vec![0.0; plane];
    for (ch, &t) in template.iter().enumerate().take(c) {
        let row = &data[ch * plane..(ch + 1) * plane];
        for (d, &v) in dist.iter_mut().zip(row) {
            let e = v - t;
            *d += e * e;
        }
    }
    for (i, &d) in dist.iter().enumerate() {
        if d < best.0 {
            best = (d, i);
        }
    }
    let s = fm.scale;
    Point2::new((best.1 % w) as f64 / s, (best.1 / w) as f64 / s)
}

/// Matches each keypoint of `a` into `b`. Keypoints outside `a` are skipped.
pub fn match_keypoints(
    a: &FeatureMap,
    b: &FeatureMap,
    keypoints: &[Point2],
) -> Result<Vec<Correspondence>> {
    let mut out = Vec::with_capacity(keypoints.len());
    for &p in keypoints {
        if !a.contains(p) {
            continue;
        }
        let tpl = sample_feature(a, p)?;
        out.push(Correspondence {
            from: p,
            to: best_match(b, &tpl),
        });
    }
    Ok(out)
}

/// Similarity that moves the centroid to the origin and the mean distance to
/// sqrt(2).
fn normalizer(pts: &[Point2]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.y).sum::<f64>() / n;
    let mean = pts
        .iter()
        .map(|p| p.distance(Point2::new(cx, cy)))
        .sum::<f64>()
        / n;
    let s = if mean > 0.0 {
        std::f64::consts::SQRT_2 / mean
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

fn transform(m: &Matrix3<f64>, p: Point2) -> Point2 {
    Point2::new(
        m[(0, 0)] * p.x + m[(0, 1)] * p.y + m[(0, 2)],
        m[(1, 0)] * p.x + m[(1, 1)] * p.y + m[(1, 2)],
    )
}

/// Normalized direct linear transform: least-squares homography taking each
/// `from` to its `to`. Needs at least four pairs in general position.
pub fn fit_dlt(pairs: &[Correspondence]) -> Result<Homography> {
    if pairs.len() < 4 {
        return Err(Error::DegenerateConfiguration(format!(
            "need 4 correspondences, have {}",
            pairs.len()
        )));
    }
    let froms: Vec<Point2> = pairs.iter().map(|c| c.from).collect();
    let tos: Vec<Point2> = pairs.iter().map(|c| c.to).collect();
    let (na, nb) = (normalizer(&froms), normalizer(&tos));
    // pad to at least 9 rows so the SVD exposes the full right null space
    let rows = (2 * pairs.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, c) in pairs.iter().enumerate() {
        let p = transform(&na, c.from);
        let q = transform(&nb, c.to);
        let r = 2 * i;
        a.row_mut(r)
            .copy_from_slice(&[-p.x, -p.y, -1.0, 0.0, 0.0, 0.0, q.x * p.x, q.x * p.y, q.x]);
        a.row_mut(r + 1).copy_from_slice(&[
            0.0,
            0.0,
            0.0,
            -p.x,
            -p.y,
            -1.0,
            q.y * p.x,
            q.y * p.y,
            q.y,
        ]);
    }
    let svd = a.svd(false, true);
    let vt = svd
        .v_t
        .ok_or_else(|| Error::DegenerateConfiguration("SVD did not converge".into()))?;
    let (k, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .expect("nine singular values");
    let h = vt.row(k);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let nb_inv = nb
        .try_inverse()
        .ok_or_else(|| Error::DegenerateConfiguration("degenerate target points".into()))?;
    Homography::new(nb_inv * hn * na)
}

fn inliers(h: &Homography, pairs: &[Correspondence]) -> Vec<usize> {
    pairs
        .iter()
        .enumerate()
        .filter(|(_, c)| {
            apply_homography(h, c.from)
                .is_ok_and(|q| q.is_finite() && q.distance(c.to) <= INLIER_PX)
        })
        .map(|(i, _)| i)
        .collect()
}

/// Random-sample consensus over 4-point hypotheses, then a least-squares
/// refit on the best consensus set. Pairs are put in a canonical order first,
/// so the result does not depend on input order.
pub fn ransac_homography(pairs: &[Correspondence], seed: u64) -> Result<Homography> {
    let mut pairs = pairs.to_vec();
    pairs.sort_by(|a, b| {
        (a.from.y, a.from.x, a.to.y, a.to.x)
            .partial_cmp(&(b.from.y, b.from.x, b.to.y, b.to.x))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    if pairs.len() < 4 {
        return Err(Error::DegenerateConfiguration(format!(
            "need 4 correspondences, have {}",
            pairs.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Vec<usize> = Vec::new();
    for _ in 0..RANSAC_ITERATIONS {
        let sample = rand::seq::index::sample(&mut rng, pairs.len(), 4);
        let subset: Vec<Correspondence> = sample.iter().map(|i| pairs[i]).collect();
        let Ok(h) = fit_dlt(&subset) else { continue };
        let set = inliers(&h, &pairs);
        if set.len() > best.len() {
            best = set;
            if best.len() == pairs.len() {
                break;
            }
        }
    }
    if best.len() < 4 {
        return Err(Error::DegenerateConfiguration(format!(
            "best consensus has {} inliers",
            best.len()
        )));
    }
    let chosen: Vec<Correspondence> = best.iter().map(|&i| pairs[i]).collect();
    fit_dlt(&chosen)
}

/// Matches `keypoints` from `a` into `b` and fits a homography mapping the
/// first image onto the second.
pub fn estimate_homography(
    a: &FeatureMap,
    b: &FeatureMap,
    keypoints: &[Point2],
    seed: u64,
) -> Result<Homography> {
    if keypoints.len() < 4 {
        return Err(Error::DegenerateConfiguration(format!(
            "need 4 keypoints, have {}",
            keypoints.len()
        )));
    }
    ransac_homography(&match_keypoints(a, b, keypoints)?, seed)
}

/// `n x n` grid of keypoints spanning `[margin, size - 1 - margin]`.
pub fn keypoint_grid(width: usize, height: usize, n: usize, margin: f64) -> Vec<Point2> {
    let axis = |len: usize, i: usize| {
        let span = (len - 1) as f64 - 2.0 * margin;
        if n <= 1 {
            (len - 1) as f64 / 2.0
        } else {
            (margin + span * i as f64 / (n - 1) as f64).round()
        }
    };
    let mut out = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            out.push(Point2::new(axis(width, i), axis(height, j)));
        }
    }
    out
}
