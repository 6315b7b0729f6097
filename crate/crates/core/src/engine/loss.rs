//! Motion supervision and outside-mask preservation terms.

use ndarray::{Array2, Array3, Zip};

use crate::diffusion::Tensor;
use crate::error::{Error, Result};
use crate::features::{sample_feature, scatter_feature, FeatureMap};
use crate::geometry::Point2;

/// Unit step from `handle` toward `target`, or `None` once they coincide.
pub fn drag_direction(handle: Point2, target: Point2) -> Option<Point2> {
    let d = target.sub(handle);
    let n = d.norm();
    (n > 0.0).then(|| d.scale(1.0 / n))
}

/// Integer offsets of the square patch of half-size `radius`.
pub fn patch_offsets(radius: usize) -> impl Iterator<Item = Point2> {
    let r = radius as isize;
    (-r..=r).flat_map(move |dy| (-r..=r).map(move |dx| Point2::new(dx as f64, dy as f64)))
}

/// Motion supervision: every patch feature around an active handle is
/// compared, in L1, with the feature one unit step further toward its
/// target. The unshifted side is a constant; the returned gradient flows only
/// through the shifted samples. Patch points whose shifted sample leaves the
/// map are skipped.
pub fn motion_supervision(
    fm: &FeatureMap,
    handles: &[Point2],
    targets: &[Point2],
    active: &[bool],
    r1: usize,
) -> Result<(f64, FeatureMap)> {
    let mut grad = FeatureMap::new(Array3::zeros(fm.data.dim()), fm.scale);
    let mut loss = 0.0;
    let mut any = false;
    for ((h, t), _) in handles
        .iter()
        .zip(targets)
        .zip(active)
        .filter(|(_, &on)| on)
    {
        let Some(d) = drag_direction(*h, *t) else {
            continue;
        };
        any = true;
        for off in patch_offsets(r1) {
            let q = h.add(off);
            let shifted = q.add(d);
            if !fm.contains(q) || !fm.contains(shifted) {
                continue;
            }
            let anchor = sample_feature(fm, q)?;
            let moved = sample_feature(fm, shifted)?;
            let signs: Vec<f64> = moved
                .iter()
                .zip(&anchor)
                .map(|(m, a)| {
                    loss += (m - a).abs();
                    sign(m - a)
                })
                .collect();
            scatter_feature(&mut grad, shifted, &signs)?;
        }
    }
    if !any {
        return Err(Error::AllHandlesConverged);
    }
    Ok((loss, grad))
}

/// `lambda * |(current - original) * preserve|_1` with its gradient in the
/// space of `current`. `preserve` marks cells outside the editable mask.
pub fn preservation(
    current: &Tensor,
    original: &Tensor,
    preserve: &Array2<bool>,
    lambda: f64,
) -> (f64, Tensor) {
    let mut grad = Tensor::zeros(current.dim());
    let mut loss = 0.0;
    if lambda == 0.0 {
        return (0.0, grad);
    }
    Zip::indexed(&mut grad)
        .and(current)
        .and(original)
        .for_each(|(_, y, x), g, &c, &o| {
            if preserve[[y, x]] {
                loss += (c - o).abs();
                *g = lambda * sign(c - o);
            }
        });
    (lambda * loss, grad)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ramp_map() -> FeatureMap {
        // two channels: f0 = x + 2y, f1 = 3 - 0.5x
        FeatureMap::new(
            Array3::from_shape_fn((2, 12, 12), |(c, y, x)| {
                let (x, y) = (x as f64, y as f64);
                if c == 0 {
                    x + 2.0 * y
                } else {
                    3.0 - 0.5 * x
                }
            }),
            1.0,
        )
    }

    #[test]
    fn hand_summed_patch_loss() {
        // Oracle: on affine fields each patch term is |grad f . d| per
        // channel, independent of the patch point.
        let fm = ramp_map();
        let h = Point2::new(5.0, 5.0);
        let t = Point2::new(8.0, 9.0);
        let d = Point2::new(0.6, 0.8);
        let per_point = (d.x + 2.0 * d.y).abs() + (0.5 * d.x).abs();
        let (loss, _) = motion_supervision(&fm, &[h], &[t], &[true], 1).unwrap();
        assert_abs_diff_eq!(loss, 9.0 * per_point, epsilon = 1e-12);
    }

    #[test]
    fn constant_features_give_zero_loss() {
        let fm = FeatureMap::new(Array3::from_elem((3, 8, 8), 0.25), 1.0);
        let (loss, _) = motion_supervision(
            &fm,
            &[Point2::new(3.0, 3.0)],
            &[Point2::new(6.0, 3.0)],
            &[true],
            1,
        )
        .unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn all_converged_is_an_error() {
        let fm = ramp_map();
        let p = Point2::new(4.0, 4.0);
        assert!(matches!(
            motion_supervision(&fm, &[p], &[p], &[true], 1),
            Err(Error::AllHandlesConverged)
        ));
        assert!(matches!(
            motion_supervision(&fm, &[p], &[Point2::new(9.0, 4.0)], &[false], 1),
            Err(Error::AllHandlesConverged)
        ));
    }

    #[test]
    fn preservation_vanishes_on_identical_latents() {
        let z = Tensor::from_shape_fn((2, 3, 3), |(c, y, x)| (c + y * x) as f64);
        let keep = Array2::from_elem((3, 3), true);
        let (loss, grad) = preservation(&z, &z, &keep, 0.1);
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn preservation_ignores_editable_cells() {
        let a = Tensor::zeros((1, 2, 2));
        let b = Tensor::ones((1, 2, 2));
        let keep = Array2::from_shape_fn((2, 2), |(y, x)| y == 0 && x == 1);
        let (loss, grad) = preservation(&a, &b, &keep, 2.0);
        assert_eq!(loss, 2.0);
        assert_eq!(grad[[0, 0, 1]], -2.0);
        assert_eq!(grad[[0, 1, 1]], 0.0);
    }
}
