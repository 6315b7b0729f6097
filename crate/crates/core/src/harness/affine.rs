//! Single-transform affine case curation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    apply_homography, frame_corners, AffineCategory, AngleRad, Homography, Point2,
};
use crate::image::{sample_plane, Image};

/// Closed sampling interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "{what} range [{}, {}] is empty",
                self.lo, self.hi
            )))
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }

    /// A magnitude from the range with a random sign.
    fn sample_signed(&self, rng: &mut impl Rng) -> f64 {
        let m = self.sample(rng);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    }
}

/// Parameter ranges for each category. Rotation, translation and perspective
/// ranges are magnitudes and get a random sign; translation draws each
/// component separately, perspective each bottom-row entry (1/pixel). The
/// scale range is a factor of at least 1 that is inverted half the time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamRanges {
    pub rotation_deg: Range,
    pub scale: Range,
    pub translation_px: Range,
    pub perspective: Range,
}

impl Default for ParamRanges {
    fn default() -> Self {
        Self {
            rotation_deg: Range::new(5.0, 60.0),
            scale: Range::new(1.15, 1.4),
            translation_px: Range::new(3.0, 7.0),
            perspective: Range::new(2e-3, 4e-3),
        }
    }
}

impl ParamRanges {
    /// Every category collapses to the identity.
    pub fn identity() -> Self {
        Self {
            rotation_deg: Range::point(0.0),
            scale: Range::point(1.0),
            translation_px: Range::point(0.0),
            perspective: Range::point(0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.rotation_deg.validate("rotation")?;
        self.scale.validate("scale")?;
        self.translation_px.validate("translation")?;
        self.perspective.validate("perspective")?;
        if self.scale.lo < 1.0 {
            return Err(Error::InvalidConfig(
                "scale range must be at least 1".into(),
            ));
        }
        if self.rotation_deg.lo < 0.0 || self.translation_px.lo < 0.0 || self.perspective.lo < 0.0 {
            return Err(Error::InvalidConfig(
                "rotation, translation and perspective ranges are magnitudes".into(),
            ));
        }
        Ok(())
    }
}

/// Parameters of one pure transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AffineParams {
    Scaling { factor: f64 },
    Rotation { degrees: f64 },
    Perspective { px: f64, py: f64 },
    Translation { dx: f64, dy: f64 },
}

impl AffineParams {
    pub fn category(&self) -> AffineCategory {
        match self {
            AffineParams::Scaling { .. } => AffineCategory::Scaling,
            AffineParams::Rotation { .. } => AffineCategory::Rotation,
            AffineParams::Perspective { .. } => AffineCategory::Perspective,
            AffineParams::Translation { .. } => AffineCategory::Translation,
        }
    }

    fn sample(category: AffineCategory, ranges: &ParamRanges, rng: &mut impl Rng) -> Self {
        match category {
            AffineCategory::Scaling => AffineParams::Scaling {
                factor: {
                    let m = ranges.scale.sample(rng);
                    if rng.random::<bool>() {
                        m
                    } else {
                        1.0 / m
                    }
                },
            },
            AffineCategory::Rotation => AffineParams::Rotation {
                degrees: ranges.rotation_deg.sample_signed(rng),
            },
            AffineCategory::Perspective => AffineParams::Perspective {
                px: ranges.perspective.sample_signed(rng),
                py: ranges.perspective.sample_signed(rng),
            },
            AffineCategory::Translation => AffineParams::Translation {
                dx: ranges.translation_px.sample_signed(rng),
                dy: ranges.translation_px.sample_signed(rng),
            },
        }
    }
}

/// The transform described by `params`, acting about `center` (translation
/// ignores the center).
pub fn pure_homography(params: AffineParams, center: Point2) -> Result<Homography> {
    match params {
        AffineParams::Translation { dx, dy } => Ok(Homography::translation(dx, dy)),
        AffineParams::Rotation { degrees } => {
            Homography::rotation(AngleRad::from_degrees(degrees)).about(center)
        }
        AffineParams::Scaling { factor } => {
            Homography::from_rows([[factor, 0.0, 0.0], [0.0, factor, 0.0], [0.0, 0.0, 1.0]])?
                .about(center)
        }
        AffineParams::Perspective { px, py } => {
            Homography::from_rows([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [px, py, 1.0]])?.about(center)
        }
    }
}

/// A reference crop, its warp by `h_gt`, and where they came from.
#[derive(Debug, Clone)]
pub struct AffineCase {
    pub reference: Image,
    pub warped: Image,
    pub h_gt: Homography,
    pub category: AffineCategory,
    pub params: AffineParams,
    pub source_index: usize,
    /// Top-left of the crop in the source image.
    pub offset: Point2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationOptions {
    /// Crop side as a fraction of the source's shorter side.
    pub crop_fraction: f64,
    /// Parameter and offset draws per case before giving up.
    pub max_attempts: usize,
}

impl Default for CurationOptions {
    fn default() -> Self {
        Self {
            crop_fraction: 0.5,
            max_attempts: 64,
        }
    }
}

fn inside(p: Point2, width: usize, height: usize) -> bool {
    p.is_finite()
        && p.x >= 0.0
        && p.y >= 0.0
        && p.x <= (width - 1) as f64
        && p.y <= (height - 1) as f64
}

/// Whether the crop at `offset`, both pushed forward and pulled back through
/// `h`, stays inside a `width x height` source.
pub fn crop_fits(
    h: &Homography,
    offset: Point2,
    crop: (usize, usize),
    width: usize,
    height: usize,
) -> Result<bool> {
    let inv = h.inverse()?;
    for c in frame_corners(crop.0, crop.1) {
        for m in [h, &inv] {
            match apply_homography(m, c) {
                Ok(q) if inside(q.add(offset), width, height) => {}
                Ok(_) | Err(Error::PointAtInfinity(_)) => return Ok(false),
                Err(e) => return Err(e),
            }
        }
    }
    Ok(true)
}

fn crop(src: &Image, offset: Point2, w: usize, h: usize) -> Image {
    let (ox, oy) = (offset.x as usize, offset.y as usize);
    Image::from_fn(src.channels(), h, w, |c, y, x| {
        src.data()[[c, oy + y, ox + x]]
    })
}

/// `warped(p) = reference(h^-1 p)`, sampling the full source so content
/// beyond the crop edge is real rather than filled.
fn warp(src: &Image, h: &Homography, offset: Point2, w: usize, ht: usize) -> Result<Image> {
    let inv = h.inverse()?;
    let mut pulled = Vec::with_capacity(w * ht);
    for y in 0..ht {
        for x in 0..w {
            pulled.push(apply_homography(&inv, Point2::new(x as f64, y as f64))?.add(offset));
        }
    }
    Ok(Image::from_fn(src.channels(), ht, w, |c, y, x| {
        let q = pulled[y * w + x];
        sample_plane(src.data().index_axis(ndarray::Axis(0), c), q.x, q.y)
    }))
}

/// Draws `count` cases of one category. Sources are used round-robin; each
/// case resamples its parameters and crop offset until the transform fits.
pub fn curate_affine_cases(
    images: &[Image],
    category: AffineCategory,
    count: usize,
    seed: u64,
    ranges: &ParamRanges,
    options: &CurationOptions,
) -> Result<Vec<AffineCase>> {
    if count == 0 || images.is_empty() {
        return Err(Error::EmptyBenchmark);
    }
    ranges.validate()?;
    if !(options.crop_fraction > 0.0 && options.crop_fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "crop fraction must be in (0, 1], got {}",
            options.crop_fraction
        )));
    }
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (category as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let index = i % images.len();
        let src = &images[index];
        let (sw, sh) = (src.width(), src.height());
        let side = ((sw.min(sh) as f64) * options.crop_fraction).floor() as usize;
        if side < 8 {
            return Err(Error::InvalidConfig(format!(
                "source {index} ({sw}x{sh}) too small to crop"
            )));
        }
        let center = Point2::new((side - 1) as f64 / 2.0, (side - 1) as f64 / 2.0);
        let mut found = None;
        for _ in 0..options.max_attempts.max(1) {
            let params = AffineParams::sample(category, ranges, &mut rng);
            let offset = Point2::new(
                rng.random_range(0..=sw - side) as f64,
                rng.random_range(0..=sh - side) as f64,
            );
            let h = pure_homography(params, center)?;
            if crop_fits(&h, offset, (side, side), sw, sh)? {
                found = Some((params, h, offset));
                break;
            }
        }
        let Some((params, h_gt, offset)) = found else {
            return Err(Error::UnsatisfiableCrop {
                attempts: options.max_attempts,
            });
        };
        out.push(AffineCase {
            reference: crop(src, offset, side, side),
            warped: warp(src, &h_gt, offset, side, side)?,
            h_gt,
            category,
            params,
            source_index: index,
            offset,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::textured_image;

    fn src() -> Vec<Image> {
        vec![textured_image(200, 200, 5)]
    }

    #[test]
    fn zero_rotation_is_identity() {
        let h = pure_homography(
            AffineParams::Rotation { degrees: 0.0 },
            Point2::new(49.5, 49.5),
        )
        .unwrap();
        assert_eq!(h, Homography::identity());
        let cases = curate_affine_cases(
            &src(),
            AffineCategory::Rotation,
            3,
            1,
            &ParamRanges::identity(),
            &CurationOptions::default(),
        )
        .unwrap();
        for c in cases {
            assert_eq!(c.h_gt, Homography::identity());
            assert!(c.reference.max_abs_diff(&c.warped) < 1e-12);
        }
    }

    #[test]
    fn translation_is_exact() {
        let h = pure_homography(
            AffineParams::Translation { dx: 5.0, dy: 0.0 },
            Point2::new(9.0, 9.0),
        )
        .unwrap();
        assert_eq!(
            h.rows(),
            [[1.0, 0.0, 5.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
        );
        for c in frame_corners(20, 20) {
            let q = apply_homography(&h, c).unwrap();
            assert_eq!(q.sub(c), Point2::new(5.0, 0.0));
        }
    }

    #[test]
    fn thirty_degrees_fits_a_200px_source() {
        let ranges = ParamRanges {
            rotation_deg: Range::point(30.0),
            ..ParamRanges::default()
        };
        let cases = curate_affine_cases(
            &src(),
            AffineCategory::Rotation,
            10,
            4,
            &ranges,
            &CurationOptions::default(),
        )
        .unwrap();
        for c in &cases {
            let side = c.reference.width();
            for k in frame_corners(side, side) {
                let q = apply_homography(&c.h_gt, k).unwrap().add(c.offset);
                assert!(inside(q, 200, 200), "{q}");
            }
        }
    }

    #[test]
    fn warp_matches_reference_under_truth() {
        // reference(p) == warped(H p) wherever H p lands on the crop
        let ranges = ParamRanges {
            rotation_deg: Range::point(20.0),
            ..ParamRanges::default()
        };
        let case = &curate_affine_cases(
            &src(),
            AffineCategory::Rotation,
            1,
            9,
            &ranges,
            &CurationOptions::default(),
        )
        .unwrap()[0];
        let p = Point2::new(50.0, 40.0);
        let q = apply_homography(&case.h_gt, p).unwrap();
        let plane = case.warped.data().index_axis(ndarray::Axis(0), 1);
        let got = sample_plane(plane, q.x, q.y);
        let want = case.reference.data()[[1, 40, 50]];
        assert!((got - want).abs() < 0.03, "{got} vs {want}");
    }

    #[test]
    fn impossible_transforms_give_up() {
        let ranges = ParamRanges {
            translation_px: Range::point(150.0),
            ..ParamRanges::default()
        };
        assert!(matches!(
            curate_affine_cases(
                &src(),
                AffineCategory::Translation,
                1,
                0,
                &ranges,
                &CurationOptions::default()
            ),
            Err(Error::UnsatisfiableCrop { .. })
        ));
    }

    #[test]
    fn curation_is_seeded() {
        let run = |seed| {
            curate_affine_cases(
                &src(),
                AffineCategory::Perspective,
                4,
                seed,
                &ParamRanges::default(),
                &CurationOptions::default(),
            )
            .unwrap()
            .into_iter()
            .map(|c| c.h_gt)
            .collect::<Vec<_>>()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }
}
