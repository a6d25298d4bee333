//! Mining per-part attribute prototypes from landmark-annotated real clips.

use rand::Rng as _;
use rayon::prelude::*;

use super::landmarks::{FacialPart, LandmarkFrame};
use super::FacialPartAttributes;
use crate::encoder::{image_patch_index, Attribute, EncoderWeights};
use crate::error::{Error, Result};
use crate::imageops::{crop, flip_horizontal, resize_bilinear};
use crate::rng::{rng_for, streams, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct MiningConfig {
    /// Augmented passes per sample.
    pub rounds: usize,
    pub gamma: Attribute,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self { rounds: 32, gamma: Attribute::K, seed: 0 }
    }
}

/// A clip (`T × 3 × S × S`, `[0, 1]` RGB) with one landmark set per frame.
#[derive(Clone, Debug)]
pub struct MiningSample {
    pub frames: Tensor,
    pub landmarks: Vec<LandmarkFrame>,
}

/// One geometric augmentation, shared by every frame of a sample in a round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MiningAugment {
    /// Upscaled side length `S' ≥ S`.
    pub scaled: usize,
    pub offset_x: usize,
    pub offset_y: usize,
    pub flip: bool,
}

impl MiningAugment {
    pub fn identity(size: usize) -> Self {
        Self { scaled: size, offset_x: 0, offset_y: 0, flip: false }
    }

    pub fn draw(size: usize, rng: &mut Rng) -> Self {
        let scale: f64 = rng.random_range(1.0..=1.3);
        let scaled = ((size as f64 * scale).round() as usize).max(size);
        Self {
            scaled,
            offset_x: rng.random_range(0..=scaled - size),
            offset_y: rng.random_range(0..=scaled - size),
            flip: rng.random_bool(0.5),
        }
    }

    pub fn apply_image(&self, img: &Tensor, size: usize) -> Result<Tensor> {
        let mut out = if self.scaled == size {
            img.clone()
        } else {
            let up = resize_bilinear(img, self.scaled, self.scaled)?;
            crop(&up, self.offset_x, self.offset_y, size, size)?
        };
        if self.flip {
            out = flip_horizontal(&out)?;
        }
        Ok(out)
    }

    /// Maps a landmark into augmented pixel coordinates, rounded to the
    /// nearest pixel; `None` if it falls outside the frame.
    pub fn map_point(&self, (x, y): (f32, f32), size: usize) -> Option<(f32, f32)> {
        let r = self.scaled as f32 / size as f32;
        let mut x = ((x + 0.5) * r - 0.5 - self.offset_x as f32).round();
        let y = ((y + 0.5) * r - 0.5 - self.offset_y as f32).round();
        if self.flip {
            x = (size - 1) as f32 - x;
        }
        let hi = (size - 1) as f32;
        ((0.0..=hi).contains(&x) && (0.0..=hi).contains(&y)).then_some((x, y))
    }
}

/// Per-(layer, part) running sums of unit-normalized patch attributes.
struct Accumulator {
    sums: Vec<[Vec<f64>; 4]>,
    counts: Vec<[usize; 4]>,
}

impl Accumulator {
    fn new(layers: usize, width: usize) -> Self {
        Self {
            sums: (0..layers).map(|_| std::array::from_fn(|_| vec![0.0; width])).collect(),
            counts: vec![[0; 4]; layers],
        }
    }

    fn merge(mut self, other: Self) -> Self {
        for (l, parts) in other.sums.into_iter().enumerate() {
            for (k, v) in parts.into_iter().enumerate() {
                self.sums[l][k].iter_mut().zip(v).for_each(|(a, b)| *a += b);
                self.counts[l][k] += other.counts[l][k];
            }
        }
        self
    }
}

fn mine_sample(
    encoder: &EncoderWeights,
    sample: &MiningSample,
    index: usize,
    config: &MiningConfig,
) -> Result<Accumulator> {
    let cfg = &encoder.config;
    let s = cfg.image_size;
    let t = match sample.frames.shape() {
        [t, 3, h, w] if *h == s && *w == s => *t,
        other => {
            return Err(Error::dim(
                "mining",
                format!("sample {index}: frames {:?} do not match encoder input [T, 3, {s}, {s}]", other),
            ))
        }
    };
    if sample.landmarks.len() != t {
        return Err(Error::Data(format!(
            "sample {index}: {} landmark frames for {t} video frames",
            sample.landmarks.len()
        )));
    }
    let (width, p) = (cfg.width(), cfg.patch_count());
    let mut acc = Accumulator::new(cfg.layers, width);
    let mut rng = rng_for(config.seed, &[streams::MINING, index as u64]);
    for _ in 0..config.rounds {
        let aug = MiningAugment::draw(s, &mut rng);
        let frames: Vec<Tensor> = (0..t)
            .map(|i| aug.apply_image(&sample.frames.slice_outer(i)?, s))
            .collect::<Result<_>>()?;
        let clip = encoder.normalize(&Tensor::stack(&frames)?)?;
        let layers = encoder.encode_clip(&clip)?;
        for (k, part) in FacialPart::ORDER.into_iter().enumerate() {
            let mut hits: Vec<(usize, usize)> = Vec::new();
            for (f, lm) in sample.landmarks.iter().enumerate() {
                for &pt in lm.part_points(part) {
                    if let Some((x, y)) = aug.map_point(pt, s) {
                        hits.push((f, image_patch_index(x, y, cfg)?));
                    }
                }
            }
            hits.sort_unstable();
            hits.dedup();
            for (l, layer) in layers.iter().enumerate() {
                let a = layer.attribute(config.gamma).data();
                for &(f, patch) in &hits {
                    let row = &a[(f * p + patch) * width..(f * p + patch + 1) * width];
                    let norm = row.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
                    if norm < 1e-12 {
                        continue;
                    }
                    acc.sums[l][k].iter_mut().zip(row).for_each(|(s, &x)| *s += x as f64 / norm);
                    acc.counts[l][k] += 1;
                }
            }
        }
    }
    Ok(acc)
}

/// Mines the four part prototypes `φ_l` for every encoder layer.
///
/// Samples are processed in parallel but reduced in input order, so the
/// result depends only on the inputs and `config.seed`.
pub fn mine_facial_attributes(
    encoder: &EncoderWeights,
    samples: &[MiningSample],
    config: &MiningConfig,
) -> Result<FacialPartAttributes> {
    if samples.is_empty() {
        return Err(Error::Mining("no samples to mine from".into()));
    }
    if config.rounds == 0 {
        return Err(Error::Config("mining needs at least one round".into()));
    }
    let cfg = &encoder.config;
    let partial: Vec<Accumulator> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| mine_sample(encoder, s, i, config))
        .collect::<Result<_>>()?;
    let total = partial
        .into_iter()
        .reduce(Accumulator::merge)
        .expect("non-empty");
    let width = cfg.width();
    let mut phi = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let mut rows = Vec::with_capacity(4 * width);
        for (k, part) in FacialPart::ORDER.into_iter().enumerate() {
            let n = total.counts[l][k];
            if n == 0 {
                return Err(Error::Mining(format!(
                    "no patches collected for part `{}` at layer {l}",
                    part.name()
                )));
            }
            let mean: Vec<f64> = total.sums[l][k].iter().map(|x| x / n as f64).collect();
            let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::Mining(format!(
                    "prototype for part `{}` at layer {l} cancels to zero",
                    part.name()
                )));
            }
            rows.extend(mean.iter().map(|x| (x / norm) as f32));
        }
        phi.push(Tensor::new(vec![4, width], rows)?);
    }
    Ok(FacialPartAttributes {
        phi,
        gamma: config.gamma,
        seed: config.seed,
        rounds: config.rounds,
    })
}
