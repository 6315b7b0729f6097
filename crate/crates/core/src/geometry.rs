//! Planar geometry: drag rotation angles, axis selection, point and image
//! rotation, homographies and the corner-error metric.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{sample_plane, BinaryMask, Image};

/// Pixel coordinate, origin top-left, `x` rightward and `y` downward.
///
/// Serializes as a two-element `[x, y]` array.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn sub(&self, other: Point2) -> Point2 {
        Point2::new(self.x - other.x, self.y - other.y)
    }

    pub fn add(&self, other: Point2) -> Point2 {
        Point2::new(self.x + other.x, self.y + other.y)
    }

    pub fn scale(&self, s: f64) -> Point2 {
        Point2::new(self.x * s, self.y * s)
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn round(&self) -> Point2 {
        Point2::new(self.x.round(), self.y.round())
    }
}

impl From<[f64; 2]> for Point2 {
    fn from([x, y]: [f64; 2]) -> Self {
        Point2::new(x, y)
    }
}

impl From<Point2> for [f64; 2] {
    fn from(p: Point2) -> Self {
        [p.x, p.y]
    }
}

impl fmt::Display for Point2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.3}, {:.3})", self.x, self.y)
    }
}

/// An angle in radians, always normalized to `(-π, π]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(from = "f64", into = "f64")]
pub struct AngleRad(f64);

impl AngleRad {
    pub const ZERO: AngleRad = AngleRad(0.0);

    pub fn new(radians: f64) -> Self {
        let mut r = radians.rem_euclid(2.0 * PI);
        if r > PI {
            r -= 2.0 * PI;
        }
        AngleRad(r)
    }

    pub fn from_degrees(deg: f64) -> Self {
        Self::new(deg.to_radians())
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn degrees(self) -> f64 {
        self.0.to_degrees()
    }
}

impl From<f64> for AngleRad {
    fn from(v: f64) -> Self {
        AngleRad::new(v)
    }
}

impl From<AngleRad> for f64 {
    fn from(a: AngleRad) -> Self {
        a.0
    }
}

/// Signed angle that carries `source` onto `handle` about `axis`.
///
/// Each offset is measured with a two-argument arctangent so the result is
/// quadrant-correct and vertical offsets are well defined.
pub fn compute_rotation_angle(source: Point2, handle: Point2, axis: Point2) -> Result<AngleRad> {
    let s = source.sub(axis);
    let h = handle.sub(axis);
    if s.norm() == 0.0 || h.norm() == 0.0 {
        return Err(Error::DegenerateAxis);
    }
    Ok(AngleRad::new(h.y.atan2(h.x) - s.y.atan2(s.x)))
}

/// Picks the pivot of an in-plane drag.
///
/// An anchored pair (source equal to target) wins, first in input order.
/// Otherwise the pivot is the mask pixel on the line through the first
/// source perpendicular to its drag direction that lies farthest from that
/// source; equal distances resolve to the smaller `(y, x)`.
pub fn select_rotation_axis(
    sources: &[Point2],
    targets: &[Point2],
    mask: &BinaryMask,
) -> Result<Point2> {
    if sources.is_empty() || sources.len() != targets.len() {
        return Err(Error::InvalidConfig(
            "axis selection needs matching, nonempty source and target lists".into(),
        ));
    }
    if let Some((s, _)) = sources.iter().zip(targets).find(|(s, t)| s == t) {
        return Ok(*s);
    }
    let s = sources[0];
    let dir = targets[0].sub(s);
    let len = dir.norm();
    let unit = dir.scale(1.0 / len);

    let mut best: Option<(f64, usize, usize)> = None;
    for ((y, x), &m) in mask.data().indexed_iter() {
        if !m {
            continue;
        }
        let rel = Point2::new(x as f64, y as f64).sub(s);
        // distance from the perpendicular line, i.e. the component along the drag
        let off_line = (rel.x * unit.x + rel.y * unit.y).abs();
        if off_line > 0.5 {
            continue;
        }
        let d = rel.norm();
        let better = match best {
            None => true,
            Some((bd, by, bx)) => d > bd || (d == bd && (y, x) < (by, bx)),
        };
        if better {
            best = Some((d, y, x));
        }
    }
    best.map(|(_, y, x)| Point2::new(x as f64, y as f64))
        .ok_or(Error::EmptyMaskLine)
}

/// Rotates `p` about `axis` by `angle` (positive angles turn +x toward +y).
pub fn rotate_point(p: Point2, axis: Point2, angle: AngleRad) -> Point2 {
    let (sin, cos) = angle.value().sin_cos();
    let d = p.sub(axis);
    Point2::new(
        axis.x + cos * d.x - sin * d.y,
        axis.y + sin * d.x + cos * d.y,
    )
}

/// Rotates image content about the image center by `angle`, resampling
/// bilinearly and replicating edge pixels for samples that leave the frame.
///
/// Content at `p` moves to `rotate_point(p, img.center(), angle)`.
pub fn rotate_image(img: &Image, angle: AngleRad) -> Image {
    if angle.value() == 0.0 {
        return img.clone();
    }
    let center = img.center();
    let inverse = AngleRad::new(-angle.value());
    let (c, h, w) = img.data().dim();
    let mut out = Image::filled(c, h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let src = rotate_point(Point2::new(x as f64, y as f64), center, inverse);
            for ch in 0..c {
                let plane = img.data().index_axis(ndarray::Axis(0), ch);
                out.data_mut()[[ch, y, x]] = sample_plane(plane, src.x, src.y);
            }
        }
    }
    out
}

/// Planar transform categories used by the affine investigation harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AffineCategory {
    Scaling,
    Rotation,
    Perspective,
    Translation,
}

impl AffineCategory {
    pub const ALL: [AffineCategory; 4] = [
        AffineCategory::Scaling,
        AffineCategory::Rotation,
        AffineCategory::Perspective,
        AffineCategory::Translation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AffineCategory::Scaling => "Scaling",
            AffineCategory::Rotation => "Rotation",
            AffineCategory::Perspective => "Perspective",
            AffineCategory::Translation => "Translation",
        }
    }
}

impl std::str::FromStr for AffineCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AffineCategory::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown category `{s}`"))
    }
}

impl fmt::Display for AffineCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Normalized, invertible 3x3 projective transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 3]; 3]", into = "[[f64; 3]; 3]")]
pub struct Homography {
    m: Matrix3<f64>,
}

const MIN_DET: f64 = 1e-12;
const MIN_DEPTH: f64 = 1e-12;

impl Homography {
    pub fn identity() -> Self {
        Self {
            m: Matrix3::identity(),
        }
    }

    /// Normalizes so the bottom-right entry is 1 and rejects singular input.
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let m = if m[(2, 2)].abs() > MIN_DEPTH {
            m / m[(2, 2)]
        } else {
            m
        };
        let det = m.determinant();
        if !det.is_finite() || det.abs() <= MIN_DET {
            return Err(Error::SingularHomography(det));
        }
        Ok(Self { m })
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::new(Matrix3::from_fn(|r, c| rows[r][c]))
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self {
            m: Matrix3::new(1.0, 0.0, dx, 0.0, 1.0, dy, 0.0, 0.0, 1.0),
        }
    }

    pub fn rotation(angle: AngleRad) -> Self {
        let (s, c) = angle.value().sin_cos();
        Self {
            m: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let m = &self.m;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }

    /// `self` applied after `first`.
    pub fn compose(&self, first: &Homography) -> Result<Homography> {
        Homography::new(self.m * first.m)
    }

    pub fn inverse(&self) -> Result<Homography> {
        let inv = self
            .m
            .try_inverse()
            .ok_or(Error::SingularHomography(self.m.determinant()))?;
        Homography::new(inv)
    }

    /// Conjugates by a translation so that the transform acts about `pivot`.
    pub fn about(&self, pivot: Point2) -> Result<Homography> {
        let to = Homography::translation(pivot.x, pivot.y);
        let from = Homography::translation(-pivot.x, -pivot.y);
        to.compose(self)?.compose(&from)
    }
}

impl TryFrom<[[f64; 3]; 3]> for Homography {
    type Error = Error;

    fn try_from(rows: [[f64; 3]; 3]) -> Result<Self> {
        Homography::from_rows(rows)
    }
}

impl From<Homography> for [[f64; 3]; 3] {
    fn from(h: Homography) -> Self {
        h.rows()
    }
}

pub fn apply_homography(h: &Homography, p: Point2) -> Result<Point2> {
    let v = h.matrix() * Vector3::new(p.x, p.y, 1.0);
    if v.z.abs() < MIN_DEPTH {
        return Err(Error::PointAtInfinity(v.z));
    }
    Ok(Point2::new(v.x / v.z, v.y / v.z))
}

/// Pixel-center corners of a `width x height` frame.
pub fn frame_corners(width: usize, height: usize) -> [Point2; 4] {
    let (w, h) = ((width - 1) as f64, (height - 1) as f64);
    [
        Point2::new(0.0, 0.0),
        Point2::new(w, 0.0),
        Point2::new(0.0, h),
        Point2::new(w, h),
    ]
}

/// Homography accuracy threshold used for corner correctness, in pixels.
pub const CORNER_CORRECT_PX: f64 = 3.0;

/// Mean distance between the four frame corners mapped by `estimated` and by
/// `truth`.
pub fn corner_error(
    estimated: &Homography,
    truth: &Homography,
    width: usize,
    height: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for c in frame_corners(width, height) {
        let a = apply_homography(estimated, c)?;
        let b = apply_homography(truth, c)?;
        total += a.distance(b);
    }
    Ok(total / 4.0)
}

pub fn is_corner_correct(err: f64) -> bool {
    err <= CORNER_CORRECT_PX
}
