//! Clip storage: a packed raw-frame container and directories of images.
//!
//! Packed layout: `u32` LE frame count, height, width, then `count` frames
//! of 8-bit RGB in row-major HWC order. Frames in memory are `F × 3 × H × W`
//! tensors in `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::imageops::{from_rgb8, resize_bilinear, to_rgb8};
use crate::tensor::Tensor;

const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "ppm", "pgm", "pnm"];

pub fn encode_packed(frames: &Tensor) -> Result<Vec<u8>> {
    let [f, 3, h, w] = frames.shape() else {
        return Err(Error::dim("encode_packed", format!("expected [F, 3, H, W], got {:?}", frames.shape())));
    };
    let mut out = Vec::with_capacity(12 + f * h * w * 3);
    for v in [*f, *h, *w] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for i in 0..*f {
        out.extend_from_slice(to_rgb8(&frames.slice_outer(i)?)?.as_raw());
    }
    Ok(out)
}

pub fn decode_packed(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 12 {
        return Err(Error::Data("packed clip shorter than its 12-byte header".into()));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (f, h, w) = (field(0), field(1), field(2));
    let frame_len = h * w * 3;
    if f == 0 || frame_len == 0 || bytes.len() != 12 + f * frame_len {
        return Err(Error::Data(format!(
            "packed clip header says {f} frames of {h}x{w}, payload is {} bytes",
            bytes.len() - 12
        )));
    }
    let frames: Vec<Tensor> = bytes[12..]
        .chunks(frame_len)
        .map(|chunk| {
            let img = image::RgbImage::from_raw(w as u32, h as u32, chunk.to_vec()).expect("sized chunk");
            from_rgb8(&img)
        })
        .collect();
    Tensor::stack(&frames)
}

pub fn write_packed(path: impl AsRef<Path>, frames: &Tensor) -> Result<()> {
    std::fs::write(path, encode_packed(frames)?)?;
    Ok(())
}

pub fn read_packed(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("cannot read `{}`: {e}", path.display())))?;
    decode_packed(&bytes).map_err(|e| Error::Data(format!("`{}`: {e}", path.display())))
}

/// Reads every image in `dir`, sorted by file name.
pub fn read_frame_dir(dir: impl AsRef<Path>) -> Result<Tensor> {
    let dir = dir.as_ref();
    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no image frames in `{}`", dir.display())));
    }
    let frames: Vec<Tensor> = files
        .iter()
        .map(|p| {
            image::open(p)
                .map(|img| from_rgb8(&img.to_rgb8()))
                .map_err(|e| Error::Data(format!("`{}`: {e}", p.display())))
        })
        .collect::<Result<_>>()?;
    Tensor::stack(&frames).map_err(|_| Error::Data(format!("frames in `{}` differ in size", dir.display())))
}

pub fn write_frame_dir(dir: impl AsRef<Path>, frames: &Tensor) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for i in 0..frames.shape()[0] {
        to_rgb8(&frames.slice_outer(i)?)?
            .save(dir.join(format!("{i:05}.png")))
            .map_err(|e| Error::Data(format!("writing frame {i}: {e}")))?;
    }
    Ok(())
}

/// Loads a clip from a frame directory or a packed container.
pub fn load_clip(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    if path.is_dir() {
        read_frame_dir(path)
    } else {
        read_packed(path)
    }
}

/// Resizes every frame to `size × size` (no-op when already that size).
pub fn resize_frames(frames: &Tensor, size: usize) -> Result<Tensor> {
    let [_, _, h, w] = frames.shape() else {
        return Err(Error::dim("resize_frames", format!("expected [F, 3, H, W], got {:?}", frames.shape())));
    };
    if *h == size && *w == size {
        return Ok(frames.clone());
    }
    let out: Vec<Tensor> = (0..frames.shape()[0])
        .map(|i| resize_bilinear(&frames.slice_outer(i)?, size, size))
        .collect::<Result<_>>()?;
    Tensor::stack(&out)
}

/// Gathers frames `indices` along the first axis.
pub fn select_frames(frames: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let items: Vec<Tensor> = indices.iter().map(|&i| frames.slice_outer(i)).collect::<Result<_>>()?;
    Tensor::stack(&items)
}
