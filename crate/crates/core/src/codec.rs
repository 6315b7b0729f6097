//! Mapping between images and diffusion latents.

use ndarray::Array3;

use crate::diffusion::Tensor;
use crate::error::{Error, Result};
use crate::image::Image;

/// Image <-> latent mapping. `scale` is the spatial downsampling factor.
pub trait LatentCodec: Send + Sync {
    fn name(&self) -> &str;
    fn scale(&self) -> usize;
    fn encode(&self, image: &Image) -> Result<Tensor>;
    fn decode(&self, latent: &Tensor) -> Result<Image>;
}

/// Identity-resolution codec: the latent is the image mapped to `[-1, 1]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct PixelCodec;

impl LatentCodec for PixelCodec {
    fn name(&self) -> &str {
        "pixel"
    }

    fn scale(&self) -> usize {
        1
    }

    fn encode(&self, image: &Image) -> Result<Tensor> {
        if image.is_empty() {
            return Err(Error::InvalidConfig("cannot encode an empty image".into()));
        }
        Ok(image.data().mapv(|v| 2.0 * v - 1.0))
    }

    fn decode(&self, latent: &Tensor) -> Result<Image> {
        if latent.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(
                "cannot decode a non-finite latent".into(),
            ));
        }
        Ok(Image::new(Array3::from_shape_fn(latent.dim(), |i| {
            ((latent[i] + 1.0) / 2.0).clamp(0.0, 1.0)
        })))
    }
}
