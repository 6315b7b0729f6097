//! Planar float images, binary masks and their file encodings.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};
use ndarray::{Array2, Array3, ArrayView2};

use crate::error::{Error, Result};
use crate::geometry::Point2;

/// A planar image, `(channels, height, width)`, with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f64>,
}

impl Image {
    pub fn new(data: Array3<f64>) -> Self {
        Self { data }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self::new(Array3::from_elem((channels, height, width), value))
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Self {
        Self::new(Array3::from_shape_fn(
            (channels, height, width),
            |(c, y, x)| f(c, y, x),
        ))
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

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    /// Whether `p` lies inside the pixel-center domain `[0, w-1] x [0, h-1]`.
    pub fn contains(&self, p: Point2) -> bool {
        p.is_finite()
            && p.x >= 0.0
            && p.y >= 0.0
            && p.x <= (self.width() - 1) as f64
            && p.y <= (self.height() - 1) as f64
    }

    /// Pixel-center coordinates of the image center.
    pub fn center(&self) -> Point2 {
        Point2::new(
            (self.width() as f64 - 1.0) / 2.0,
            (self.height() as f64 - 1.0) / 2.0,
        )
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Decodes PNG or JPEG bytes into an RGB image.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?;
        Ok(Self::from_dynamic(&img))
    }

    pub fn from_dynamic(img: &DynamicImage) -> Self {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Self::from_fn(3, h as usize, w as usize, |c, y, x| {
            rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
        })
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let (c, h, w) = self.data.dim();
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |ch: usize| {
                let v = self.data[[ch.min(c - 1), y as usize, x as usize]];
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }
}

/// Editable-region mask; `true` marks pixels the edit may change.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    data: Array2<bool>,
}

impl BinaryMask {
    pub fn new(data: Array2<bool>) -> Self {
        Self { data }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self::new(Array2::from_elem((height, width), true))
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::new(Array2::from_elem((height, width), false))
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        Self::new(Array2::from_shape_fn((height, width), |(y, x)| f(y, x)))
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[[y, x]]
    }

    pub fn data(&self) -> &Array2<bool> {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn centroid(&self) -> Option<Point2> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for ((y, x), &m) in self.data.indexed_iter() {
            if m {
                sx += x as f64;
                sy += y as f64;
                n += 1;
            }
        }
        (n > 0).then(|| Point2::new(sx / n as f64, sy / n as f64))
    }

    /// Reduces the mask by `factor` in each dimension; a block is editable
    /// if any pixel inside it is.
    pub fn downsample(&self, factor: usize) -> Self {
        if factor <= 1 {
            return self.clone();
        }
        let h = self.height().div_ceil(factor);
        let w = self.width().div_ceil(factor);
        Self::from_fn(h, w, |by, bx| {
            (by * factor..((by + 1) * factor).min(self.height())).any(|y| {
                (bx * factor..((bx + 1) * factor).min(self.width())).any(|x| self.data[[y, x]])
            })
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Decodes an image file; any nonzero luminance is editable.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let gray = image::load_from_memory(bytes)?.to_luma8();
        let (w, h) = gray.dimensions();
        Ok(Self::from_fn(h as usize, w as usize, |y, x| {
            gray.get_pixel(x as u32, y as u32)[0] != 0
        }))
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let gray = GrayImage::from_fn(self.width() as u32, self.height() as u32, |x, y| {
            image::Luma([if self.data[[y as usize, x as usize]] {
                255
            } else {
                0
            }])
        });
        let mut out = Cursor::new(Vec::new());
        gray.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// Bilinear weights for a sample at `(x, y)` with coordinates clamped to the
/// plane, so samples outside the frame replicate the nearest edge.
///
/// Returns the four `(row, col, weight)` taps.
pub(crate) fn bilinear_taps(
    width: usize,
    height: usize,
    x: f64,
    y: f64,
) -> [(usize, usize, f64); 4] {
    let xc = x.clamp(0.0, (width - 1) as f64);
    let yc = y.clamp(0.0, (height - 1) as f64);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    [
        (y0, x0, (1.0 - fx) * (1.0 - fy)),
        (y0, x1, fx * (1.0 - fy)),
        (y1, x0, (1.0 - fx) * fy),
        (y1, x1, fx * fy),
    ]
}

pub fn sample_plane(plane: ArrayView2<'_, f64>, x: f64, y: f64) -> f64 {
    let (h, w) = plane.dim();
    bilinear_taps(w, h, x, y)
        .iter()
        .map(|&(r, c, wt)| if wt == 0.0 { 0.0 } else { wt * plane[[r, c]] })
        .sum()
}
