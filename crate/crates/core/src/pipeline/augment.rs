//! Video-level augmentation: one parameter draw applied to every frame.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::imageops::{crop, flip_horizontal, gaussian_blur, jpeg_roundtrip, resize_bilinear};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Gate probabilities and parameter ranges.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_p: f64,
    pub resize_crop_p: f64,
    /// Crop side as a fraction of the frame side.
    pub crop_scale: (f64, f64),
    pub jitter_p: f64,
    /// Brightness offset and contrast factor range (± this amount).
    pub jitter: f64,
    pub jpeg_p: f64,
    pub jpeg_quality: (u8, u8),
    pub blur_p: f64,
    pub blur_sigma: (f64, f64),
    pub downscale_p: f64,
    pub downscale: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_p: 0.5,
            resize_crop_p: 0.5,
            crop_scale: (0.8, 1.0),
            jitter_p: 0.3,
            jitter: 0.2,
            jpeg_p: 0.3,
            jpeg_quality: (60, 95),
            blur_p: 0.2,
            blur_sigma: (0.1, 1.0),
            downscale_p: 0.2,
            downscale: (0.5, 0.9),
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self { flip_p: 0.0, resize_crop_p: 0.0, jitter_p: 0.0, jpeg_p: 0.0, blur_p: 0.0, downscale_p: 0.0, ..Self::default() }
    }
}

/// Concrete augmentation parameters for one clip.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    /// `(left, top, side)` in pixels.
    pub crop: Option<(usize, usize, usize)>,
    /// `(brightness offset, contrast factor)`.
    pub jitter: Option<(f32, f32)>,
    pub jpeg_quality: Option<u8>,
    pub blur_sigma: Option<f32>,
    pub downscale_side: Option<usize>,
}

impl AugmentDraw {
    pub fn draw(config: &AugmentConfig, size: usize, rng: &mut Rng) -> Self {
        let mut gate = |p: f64| p > 0.0 && rng.random_bool(p.min(1.0));
        let flip = gate(config.flip_p);
        let do_crop = gate(config.resize_crop_p);
        let do_jitter = gate(config.jitter_p);
        let do_jpeg = gate(config.jpeg_p);
        let do_blur = gate(config.blur_p);
        let do_down = gate(config.downscale_p);
        let crop = do_crop.then(|| {
            let side = ((size as f64 * rng.random_range(config.crop_scale.0..=config.crop_scale.1)).round() as usize).clamp(1, size);
            (rng.random_range(0..=size - side), rng.random_range(0..=size - side), side)
        });
        let jitter = do_jitter.then(|| {
            let j = config.jitter as f32;
            (rng.random_range(-j..=j), 1.0 + rng.random_range(-j..=j))
        });
        let jpeg_quality = do_jpeg.then(|| rng.random_range(config.jpeg_quality.0..=config.jpeg_quality.1));
        let blur_sigma = do_blur.then(|| rng.random_range(config.blur_sigma.0..=config.blur_sigma.1) as f32);
        let downscale_side = do_down.then(|| {
            ((size as f64 * rng.random_range(config.downscale.0..=config.downscale.1)).round() as usize).clamp(1, size)
        });
        Self { flip, crop, jitter, jpeg_quality, blur_sigma, downscale_side }
    }

    /// Applies the draw to one `3 × S × S` frame.
    pub fn apply_frame(&self, img: &Tensor) -> Result<Tensor> {
        let (_, h, w) = crate::imageops::dims(img)?;
        let mut x = img.clone();
        if self.flip {
            x = flip_horizontal(&x)?;
        }
        if let Some((left, top, side)) = self.crop {
            x = resize_bilinear(&crop(&x, left, top, side, side)?, h, w)?;
        }
        if let Some((b, c)) = self.jitter {
            let mean = x.data().iter().sum::<f32>() / x.len() as f32;
            x = x.map(|v| ((v - mean) * c + mean + b).clamp(0.0, 1.0));
        }
        if let Some(side) = self.downscale_side {
            x = resize_bilinear(&resize_bilinear(&x, side, side)?, h, w)?;
        }
        if let Some(s) = self.blur_sigma {
            x = gaussian_blur(&x, s)?;
        }
        if let Some(q) = self.jpeg_quality {
            x = jpeg_roundtrip(&x, q)?;
        }
        Ok(x)
    }

    pub fn apply_clip(&self, frames: &Tensor) -> Result<Tensor> {
        let out: Vec<Tensor> = (0..frames.shape()[0])
            .map(|i| self.apply_frame(&frames.slice_outer(i)?))
            .collect::<Result<_>>()?;
        Tensor::stack(&out)
    }
}

/// Draws and applies one augmentation to a `T × 3 × S × S` clip.
pub fn augment(frames: &Tensor, config: &AugmentConfig, rng: &mut Rng) -> Result<Tensor> {
    let size = frames.shape().get(3).copied().unwrap_or(0);
    AugmentDraw::draw(config, size, rng).apply_clip(frames)
}
