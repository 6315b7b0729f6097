//! Deterministic synthetic images and editing fixtures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::DragConfig;
use crate::geometry::{rotate_point, AngleRad, Point2};
use crate::image::{BinaryMask, Image};

/// Isotropic Gaussian bump.
#[derive(Debug, Clone, Copy)]
pub struct Blob {
    pub center: Point2,
    pub sigma: f64,
    pub color: [f64; 3],
}

impl Blob {
    fn value(&self, x: f64, y: f64) -> f64 {
        let d2 = (x - self.center.x).powi(2) + (y - self.center.y).powi(2);
        (-d2 / (2.0 * self.sigma * self.sigma)).exp()
    }
}

/// Renders blobs over a smooth colored background, clamped to `[0, 1]`.
pub fn render_blobs(width: usize, height: usize, background: [f64; 3], blobs: &[Blob]) -> Image {
    Image::from_fn(3, height, width, |c, y, x| {
        let (xf, yf) = (x as f64, y as f64);
        let base = background[c] + 0.05 * ((xf / width as f64) - 0.5) * (c as f64 - 1.0);
        let v = blobs
            .iter()
            .fold(base, |acc, b| acc + b.color[c] * b.value(xf, yf));
        v.clamp(0.0, 1.0)
    })
}

/// Richly textured image for matching experiments: many random blobs of
/// mixed sizes and colors.
pub fn textured_image(width: usize, height: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let area = (width * height) as f64;
    let count = ((area / 90.0) as usize).max(8);
    let blobs: Vec<Blob> = (0..count)
        .map(|_| Blob {
            center: Point2::new(
                rng.random_range(0.0..width as f64),
                rng.random_range(0.0..height as f64),
            ),
            sigma: rng.random_range(1.5..5.0),
            color: [
                rng.random_range(-0.45..0.45),
                rng.random_range(-0.45..0.45),
                rng.random_range(-0.45..0.45),
            ],
        })
        .collect();
    render_blobs(width, height, [0.5, 0.5, 0.5], &blobs)
}

/// Adds seeded uniform noise of amplitude `amp`, clamped to `[0, 1]`.
pub fn add_noise(img: &Image, amp: f64, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    out.data_mut()
        .mapv_inplace(|v| (v + rng.random_range(-amp..=amp)).clamp(0.0, 1.0));
    out
}

/// Single-pass rotation of an image about an arbitrary pivot; content at `p`
/// moves to `rotate_point(p, pivot, angle)`. Edge replication fill.
pub fn rotate_image_about(img: &Image, pivot: Point2, angle: AngleRad) -> Image {
    let inverse = AngleRad::new(-angle.value());
    let (c, h, w) = img.data().dim();
    Image::from_fn(c, h, w, |ch, y, x| {
        let src = rotate_point(Point2::new(x as f64, y as f64), pivot, inverse);
        let plane = img.data().index_axis(ndarray::Axis(0), ch);
        crate::image::sample_plane(plane, src.x, src.y)
    })
}

/// A tracking trial: a handle sits beside a bright blob, so its features
/// encode the direction toward the blob. The scene is then turned by
/// `angle` about an off-center pivot chosen so the source lands on a pixel.
/// A template taken from the unrotated image matches best where the blob
/// direction is unchanged, which drifts away from the true position as the
/// angle grows.
#[derive(Debug, Clone)]
pub struct RotationTrial {
    pub image: Image,
    pub rotated: Image,
    pub source: Point2,
    /// Where the source content lands after the rotation.
    pub truth: Point2,
    /// Tracker start: the true position perturbed by up to 1 px per axis.
    pub start: Point2,
    pub pivot: Point2,
    pub angle: AngleRad,
}

pub const TRIAL_SIZE: usize = 64;

pub fn rotation_trial(angle: AngleRad, seed: u64) -> RotationTrial {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = TRIAL_SIZE;
    let mid = (n as f64 - 1.0) / 2.0;
    let source = Point2::new(
        (mid + rng.random_range(-4.0..4.0f64)).round(),
        (mid + rng.random_range(-4.0..4.0f64)).round(),
    );
    // The unrotated handle content reappears, after the turn, at
    // `truth + (R - I) offset`. Choose the offset so that point is a pixel
    // 2.2-2.8 px from the truth; when that would put the blob too far from
    // the handle (small angles), fall back to a 4 px offset.
    let drifts = [
        (2, 1),
        (1, 2),
        (2, 2),
        (-2, 1),
        (-1, 2),
        (-2, 2),
        (2, -1),
        (1, -2),
        (2, -2),
        (-2, -1),
        (-1, -2),
        (-2, -2),
    ];
    let (wx, wy) = drifts[rng.random_range(0..drifts.len())];
    let drift = Point2::new(wx as f64, wy as f64);
    let mut offset = solve_drift_offset(drift, angle);
    if !(offset.norm() <= 4.5) {
        offset = drift.scale(4.0 / drift.norm());
    }
    let mut blobs = vec![Blob {
        center: source.add(offset),
        sigma: 3.0,
        color: [0.5, 0.4, 0.45],
    }];
    // faint clutter far from the handle keeps the scene from being trivial
    for _ in 0..6 {
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        let r = rng.random_range(20.0..28.0);
        blobs.push(Blob {
            center: Point2::new(mid + r * a.cos(), mid + r * a.sin()),
            sigma: rng.random_range(2.0..4.0),
            color: [
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
            ],
        });
    }
    let image = render_blobs(n, n, [0.35, 0.4, 0.45], &blobs);
    // Pick an off-center pivot, then move it so the source lands exactly on
    // a pixel; grid search can then recover the truth without rounding.
    let rough = Point2::new(
        mid + rng.random_range(-6.0..6.0),
        mid + rng.random_range(-6.0..6.0),
    );
    let (truth, pivot) = if angle.value() == 0.0 {
        (source, rough)
    } else {
        let truth = rotate_point(source, rough, angle).round();
        (truth, pivot_mapping(source, truth, angle))
    };
    let rotated = add_noise(
        &rotate_image_about(&image, pivot, angle),
        0.005,
        seed ^ 0x9e37,
    );
    let start = Point2::new(
        truth.x + rng.random_range(-1i32..=1) as f64,
        truth.y + rng.random_range(-1i32..=1) as f64,
    );
    RotationTrial {
        image,
        rotated,
        source,
        truth,
        start,
        pivot,
        angle,
    }
}

/// Offset `v` with `(R - I) v = drift` for the rotation `R` by `angle`.
fn solve_drift_offset(drift: Point2, angle: AngleRad) -> Point2 {
    let (sin, cos) = angle.value().sin_cos();
    let (a, b, c, d) = (cos - 1.0, -sin, sin, cos - 1.0);
    let det = a * d - b * c;
    Point2::new(
        (d * drift.x - b * drift.y) / det,
        (a * drift.y - c * drift.x) / det,
    )
}

/// The pivot about which a rotation by `angle` carries `from` onto `to`.
/// Undefined (non-finite) for a zero angle.
pub fn pivot_mapping(from: Point2, to: Point2, angle: AngleRad) -> Point2 {
    // (I - R) c = to - R from
    let (sin, cos) = angle.value().sin_cos();
    let rx = to.x - (cos * from.x - sin * from.y);
    let ry = to.y - (sin * from.x + cos * from.y);
    let (a, b, c, d) = (1.0 - cos, sin, -sin, 1.0 - cos);
    let det = a * d - b * c;
    Point2::new((d * rx - b * ry) / det, (a * ry - c * rx) / det)
}

/// Drag task: a bright limb anchored at a pivot is swung by `degrees`.
/// Three pairs: the anchored pivot and two handles along the limb.
pub fn arc_drag_config(degrees: f64) -> DragConfig {
    let n = TRIAL_SIZE;
    let pivot = Point2::new(20.0, 40.0);
    let heading = AngleRad::from_degrees(-35.0);
    let along = |r: f64| {
        Point2::new(
            pivot.x + r * heading.value().cos(),
            pivot.y + r * heading.value().sin(),
        )
    };
    let handles = [along(12.0), along(22.0)];
    let mut blobs = vec![Blob {
        center: pivot,
        sigma: 3.0,
        color: [0.3, 0.2, 0.1],
    }];
    for (i, h) in handles.iter().enumerate() {
        blobs.push(Blob {
            center: *h,
            sigma: 2.5,
            color: [0.45, 0.3 + 0.1 * i as f64, 0.2],
        });
    }
    let image = render_blobs(n, n, [0.3, 0.35, 0.4], &blobs);
    let angle = AngleRad::from_degrees(degrees);
    let mut sources = vec![pivot];
    let mut targets = vec![pivot];
    for h in handles {
        sources.push(h.round());
        targets.push(rotate_point(h.round(), pivot, angle).round());
    }
    let mask = BinaryMask::from_fn(n, n, |y, x| {
        Point2::new(x as f64, y as f64).distance(pivot) <= 30.0
    });
    DragConfig::new(image, sources, targets, mask, "a swinging limb")
}
