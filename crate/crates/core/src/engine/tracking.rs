//! Nearest-neighbour point tracking against (possibly rotated) references.

use crate::diffusion::LatentCode;
use crate::error::{Error, Result};
use crate::features::{l1_distance, sample_feature, FeatureMap};
use crate::geometry::{AngleRad, Point2};

/// Features of the input image rotated by one quantized angle, with the
/// source points carried along.
#[derive(Debug, Clone)]
pub struct RotatedReference {
    pub angle_key: i64,
    pub angle: AngleRad,
    pub rotated_latent: LatentCode,
    pub rotated_sources: Vec<Point2>,
    pub features: FeatureMap,
}

impl RotatedReference {
    /// Feature vector of source `i` in the rotated image.
    pub fn template(&self, i: usize) -> Result<Vec<f64>> {
        sample_feature(&self.features, self.rotated_sources[i])
    }
}

/// Index of the angle bin of width `bin` containing `angle`.
pub fn angle_key(angle: AngleRad, bin: f64) -> i64 {
    (angle.value() / bin).round() as i64
}

/// Representative angle of bin `key`.
pub fn bin_angle(key: i64, bin: f64) -> AngleRad {
    AngleRad::new(key as f64 * bin)
}

/// Integer grid points within the square window of half-size `radius`
/// around `center` that the map can sample, in `(y, x)` order.
pub fn search_window(fm: &FeatureMap, center: Point2, radius: usize) -> Vec<Point2> {
    let r = radius as f64;
    let (x0, x1) = ((center.x - r).ceil() as i64, (center.x + r).floor() as i64);
    let (y0, y1) = ((center.y - r).ceil() as i64, (center.y + r).floor() as i64);
    let mut out = Vec::new();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let q = Point2::new(x as f64, y as f64);
            if fm.contains(q) {
                out.push(q);
            }
        }
    }
    out
}

/// Grid point in the window around `center` whose feature is closest in L1
/// to `template`. Ties go to the point nearest `center`, then the smaller
/// `(y, x)`.
pub fn nearest_neighbor(
    fm: &FeatureMap,
    template: &[f64],
    center: Point2,
    radius: usize,
) -> Result<Point2> {
    let mut best: Option<(f64, f64, Point2)> = None;
    for q in search_window(fm, center, radius) {
        let cost = l1_distance(&sample_feature(fm, q)?, template);
        let dist = q.distance(center);
        // window points arrive in (y, x) order, so strict comparison keeps
        // the earliest on a full tie
        let better = match best {
            None => true,
            Some((bc, bd, _)) => cost < bc || (cost == bc && dist < bd),
        };
        if better {
            best = Some((cost, dist, q));
        }
    }
    best.map(|(_, _, q)| q).ok_or(Error::OutOfBounds {
        x: center.x,
        y: center.y,
        width: fm.width(),
        height: fm.height(),
    })
}
