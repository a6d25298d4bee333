//! Planar RGB image helpers. Images are `3 × H × W` tensors in `[0, 1]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) fn dims(img: &Tensor) -> Result<(usize, usize, usize)> {
    match img.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        other => Err(Error::dim("image", format!("expected [C, H, W], got {:?}", other))),
    }
}

/// Bilinear resize with pixel-center alignment and edge clamping.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = dims(img)?;
    let src = img.data();
    let mut out = vec![0.0f32; c * out_h * out_w];
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    for y in 0..out_h {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f32;
        for x in 0..out_w {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f32;
            for ch in 0..c {
                let at = |yy: usize, xx: usize| src[(ch * h + yy) * w + xx];
                let top = at(y0, x0) * (1.0 - wx) + at(y0, x1) * wx;
                let bottom = at(y1, x0) * (1.0 - wx) + at(y1, x1) * wx;
                out[(ch * out_h + y) * out_w + x] = top * (1.0 - wy) + bottom * wy;
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Crops a `size × size` window at (`left`, `top`).
pub fn crop(img: &Tensor, left: usize, top: usize, height: usize, width: usize) -> Result<Tensor> {
    let (c, h, w) = dims(img)?;
    if left + width > w || top + height > h {
        return Err(Error::dim(
            "crop",
            format!("window {width}x{height} at ({left}, {top}) exceeds {w}x{h}"),
        ));
    }
    let src = img.data();
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        for y in top..top + height {
            out.extend_from_slice(&src[(ch * h + y) * w + left..(ch * h + y) * w + left + width]);
        }
    }
    Tensor::new(vec![c, height, width], out)
}

pub fn flip_horizontal(img: &Tensor) -> Result<Tensor> {
    let (_, _, w) = dims(img)?;
    let mut out = img.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    Ok(out)
}

/// Normalized 1-D Gaussian kernel with radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut k: Vec<f32> = (0..=2 * radius)
        .map(|i| {
            let d = i as f32 - radius as f32;
            (-0.5 * d * d / (sigma * sigma)).exp()
        })
        .collect();
    let total: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(img: &Tensor, sigma: f32) -> Result<Tensor> {
    let (c, h, w) = dims(img)?;
    if sigma <= 0.0 {
        return Ok(img.clone());
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let src = img.data();
    let mut tmp = vec![0.0f32; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                    acc += kv * src[(ch * h + y) * w + xx];
                }
                tmp[(ch * h + y) * w + x] = acc;
            }
        }
    }
    let mut out = vec![0.0f32; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[(ch * h + yy) * w + x];
                }
                out[(ch * h + y) * w + x] = acc;
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Peak signal-to-noise ratio in dB for signals in `[0, 1]`; identical
/// inputs give `+inf`.
pub fn psnr(a: &Tensor, b: &Tensor) -> f64 {
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = (*x - *y) as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Quantizes a `3 × H × W` image in `[0, 1]` to 8-bit RGB.
pub fn to_rgb8(img: &Tensor) -> Result<image::RgbImage> {
    let (c, h, w) = dims(img)?;
    if c != 3 {
        return Err(Error::dim("to_rgb8", format!("expected 3 channels, got {c}")));
    }
    let d = img.data();
    let plane = h * w;
    let mut buf = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            buf.push((d[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(image::RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized to image"))
}

pub fn from_rgb8(img: &image::RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut out = vec![0.0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            out[ch * plane + i] = px[ch] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], out).expect("sized")
}

/// JPEG encode/decode round trip at `quality` (1–100).
pub fn jpeg_roundtrip(img: &Tensor, quality: u8) -> Result<Tensor> {
    let rgb = to_rgb8(img)?;
    let mut bytes = Vec::new();
    image::codecs::jpeg::JpegEncoder::new_with_quality(&mut bytes, quality.clamp(1, 100))
        .encode_image(&rgb)
        .map_err(|e| Error::Data(format!("jpeg encode: {e}")))?;
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Jpeg)
        .map_err(|e| Error::Data(format!("jpeg decode: {e}")))?;
    Ok(from_rgb8(&decoded.to_rgb8()))
}
