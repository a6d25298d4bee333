//! Robustness perturbations with five severity levels each.
//!
//! Severity 0 returns the input unchanged. Ladders (levels 1–5):
//!
//! | kind       | parameter                                       |
//! |------------|-------------------------------------------------|
//! | saturation | blend toward luma, factor 0.8 → 0.0              |
//! | contrast   | blend toward frame mean, factor 0.85 → 0.25      |
//! | block      | 2, 4, 6, 8, 10 black blocks of side S/4 (nested) |
//! | noise      | fixed Gaussian pattern, σ = 0.02 … 0.10          |
//! | blur       | Gaussian σ = 0.5 … 2.5                           |
//! | jpeg       | quality 90, 70, 50, 30, 10                       |
//! | compress   | downscale 0.9 … 0.3, then JPEG 80 … 20           |

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::imageops::{gaussian_blur, jpeg_roundtrip, resize_bilinear};
use crate::rng::{rng_for, streams};
use crate::tensor::Tensor;

pub const MAX_SEVERITY: u8 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PerturbKind {
    Saturation,
    Contrast,
    Block,
    Noise,
    Blur,
    Jpeg,
    Compress,
}

impl PerturbKind {
    pub const ALL: [PerturbKind; 7] = [
        PerturbKind::Saturation,
        PerturbKind::Contrast,
        PerturbKind::Block,
        PerturbKind::Noise,
        PerturbKind::Blur,
        PerturbKind::Jpeg,
        PerturbKind::Compress,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PerturbKind::Saturation => "saturation",
            PerturbKind::Contrast => "contrast",
            PerturbKind::Block => "block",
            PerturbKind::Noise => "noise",
            PerturbKind::Blur => "blur",
            PerturbKind::Jpeg => "jpeg",
            PerturbKind::Compress => "compress",
        }
    }
}

impl std::str::FromStr for PerturbKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PerturbKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown perturbation `{s}`")))
    }
}

const SATURATION: [f32; 5] = [0.8, 0.6, 0.4, 0.2, 0.0];
const CONTRAST: [f32; 5] = [0.85, 0.7, 0.55, 0.4, 0.25];
const NOISE_SIGMA: [f32; 5] = [0.02, 0.04, 0.06, 0.08, 0.10];
const BLUR_SIGMA: [f32; 5] = [0.5, 1.0, 1.5, 2.0, 2.5];
const JPEG_QUALITY: [u8; 5] = [90, 70, 50, 30, 10];
const COMPRESS_SCALE: [f64; 5] = [0.9, 0.75, 0.6, 0.45, 0.3];
const COMPRESS_QUALITY: [u8; 5] = [80, 65, 50, 35, 20];
const BLOCKS_PER_LEVEL: usize = 2;

/// Noise standard deviation used at `severity` (0 for severity 0).
pub fn noise_sigma(severity: u8) -> f32 {
    if severity == 0 { 0.0 } else { NOISE_SIGMA[severity as usize - 1] }
}

fn per_frame(frames: &Tensor, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let out: Vec<Tensor> = (0..frames.shape()[0])
        .map(|i| f(&frames.slice_outer(i)?))
        .collect::<Result<_>>()?;
    Tensor::stack(&out)
}

/// Applies `kind` at `severity` to a `T × 3 × H × W` clip. Deterministic in
/// `(seed, kind, severity)`.
pub fn perturb(frames: &Tensor, kind: PerturbKind, severity: u8, seed: u64) -> Result<Tensor> {
    if severity > MAX_SEVERITY {
        return Err(Error::Config(format!("severity must be in 0..={MAX_SEVERITY}, got {severity}")));
    }
    let [t, 3, h, w] = *frames.shape() else {
        return Err(Error::dim("perturb", format!("expected [T, 3, H, W], got {:?}", frames.shape())));
    };
    if severity == 0 {
        return Ok(frames.clone());
    }
    let level = severity as usize - 1;
    let plane = h * w;
    match kind {
        PerturbKind::Saturation => {
            let f = SATURATION[level];
            let mut out = frames.clone();
            for frame in out.data_mut().chunks_mut(3 * plane) {
                for i in 0..plane {
                    let (r, g, b) = (frame[i], frame[plane + i], frame[2 * plane + i]);
                    let luma = 0.299 * r + 0.587 * g + 0.114 * b;
                    for c in 0..3 {
                        frame[c * plane + i] = luma + f * (frame[c * plane + i] - luma);
                    }
                }
            }
            Ok(out)
        }
        PerturbKind::Contrast => {
            let f = CONTRAST[level];
            let mut out = frames.clone();
            for frame in out.data_mut().chunks_mut(3 * plane) {
                let mean = frame.iter().sum::<f32>() / frame.len() as f32;
                frame.iter_mut().for_each(|v| *v = mean + f * (*v - mean));
            }
            Ok(out)
        }
        PerturbKind::Block => {
            let side = (h.min(w) / 4).max(1);
            let mut rng = rng_for(seed, &[streams::PERTURB, 0]);
            let blocks: Vec<(usize, usize)> = (0..BLOCKS_PER_LEVEL * MAX_SEVERITY as usize)
                .map(|_| (rng.random_range(0..=w - side), rng.random_range(0..=h - side)))
                .collect();
            let mut out = frames.clone();
            for frame in out.data_mut().chunks_mut(3 * plane) {
                for &(x0, y0) in &blocks[..BLOCKS_PER_LEVEL * severity as usize] {
                    for c in 0..3 {
                        for y in y0..y0 + side {
                            frame[c * plane + y * w + x0..c * plane + y * w + x0 + side].fill(0.0);
                        }
                    }
                }
            }
            Ok(out)
        }
        PerturbKind::Noise => {
            // one pattern per clip shape, scaled per level, so levels nest
            let sigma = NOISE_SIGMA[level];
            let mut rng = rng_for(seed, &[streams::PERTURB, 1, t as u64, h as u64, w as u64]);
            let mut out = frames.clone();
            for v in out.data_mut() {
                let n: f32 = StandardNormal.sample(&mut rng);
                *v = (*v + sigma * n).clamp(0.0, 1.0);
            }
            Ok(out)
        }
        PerturbKind::Blur => per_frame(frames, |f| gaussian_blur(f, BLUR_SIGMA[level])),
        PerturbKind::Jpeg => per_frame(frames, |f| jpeg_roundtrip(f, JPEG_QUALITY[level])),
        PerturbKind::Compress => per_frame(frames, |f| {
            let sh = ((h as f64 * COMPRESS_SCALE[level]).round() as usize).max(1);
            let sw = ((w as f64 * COMPRESS_SCALE[level]).round() as usize).max(1);
            let small = resize_bilinear(f, sh, sw)?;
            jpeg_roundtrip(&resize_bilinear(&small, h, w)?, COMPRESS_QUALITY[level])
        }),
    }
}
