//! Spatial-query attention heatmaps, written as binary PGM images.

use std::path::{Path, PathBuf};

use crate::autodiff::Graph;
use crate::detector::{DetectorConfig, DetectorParams};
use crate::encoder::{image_patch_index, EncoderConfig, LayerAttributes};
use crate::error::{Error, Result};
use crate::spatial::{spatial_attention, FacialPart, LandmarkFrame};
use crate::taps::bind_taps;
use crate::tensor::Tensor;

/// Query-over-patch attention averaged over heads and layers:
/// `N × T × P` (rows sum to one).
pub fn affinity_maps(config: &DetectorConfig, params: &DetectorParams, clip: &[LayerAttributes]) -> Result<Tensor> {
    if !config.use_spatial {
        return Err(Error::Config("affinity maps need the spatial module".into()));
    }
    if clip.len() != config.layers {
        return Err(Error::dim("affinity_maps", format!("expected {} layers, got {}", config.layers, clip.len())));
    }
    let mut g = Graph::<f32>::new();
    let vars = params.bind(&mut g, config)?;
    let (n, t, p, h) = (config.queries, clip[0].frames(), config.patch_count, config.heads);
    let mut acc = vec![0.0f64; n * t * p];
    for (la, &q) in clip.iter().zip(&vars.queries) {
        let tv = bind_taps(&mut g, la, &[config.spatial_gamma]);
        let w = spatial_attention(&mut g, q, &tv, config.spatial_gamma)?; // T × H × N × P
        for (i, &v) in g.value(w).data().iter().enumerate() {
            let pi = i % p;
            let qi = (i / p) % n;
            let ti = i / (p * n * h);
            acc[(qi * t + ti) * p + pi] += v as f64;
        }
    }
    let norm = (h * clip.len()) as f64;
    Tensor::new(vec![n, t, p], acc.into_iter().map(|v| (v / norm) as f32).collect())
}

/// Encodes a square map as 8-bit binary PGM, scaled so its maximum is 255.
pub fn to_pgm(map: &[f32], side: usize) -> Vec<u8> {
    let max = map.iter().cloned().fold(0.0f32, f32::max);
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.extend(map.iter().map(|&v| if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 }));
    out
}

/// Writes `query{i}_frame{t}.pgm` for every query and frame of the mean of
/// `maps` (each `N × T × P`). Returns the written paths.
pub fn dump_affinity(maps: &[Tensor], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let first = maps.first().ok_or_else(|| Error::Data("no clips to visualize".into()))?;
    let [n, t, p] = *first.shape() else {
        return Err(Error::dim("dump_affinity", format!("expected [N, T, P], got {:?}", first.shape())));
    };
    let side = (p as f64).sqrt().round() as usize;
    let mut mean = vec![0.0f32; n * t * p];
    for m in maps {
        if m.shape() != first.shape() {
            return Err(Error::dim("dump_affinity", format!("map shapes differ: {:?} vs {:?}", m.shape(), first.shape())));
        }
        mean.iter_mut().zip(m.data()).for_each(|(a, b)| *a += b / maps.len() as f32);
    }
    std::fs::create_dir_all(out_dir)?;
    let mut paths = Vec::with_capacity(n * t);
    for q in 0..n {
        for f in 0..t {
            let path = out_dir.join(format!("query{q}_frame{f}.pgm"));
            std::fs::write(&path, to_pgm(&mean[(q * t + f) * p..(q * t + f + 1) * p], side))?;
            paths.push(path);
        }
    }
    Ok(paths)
}

/// Mean attention mass that query `i` places on patches containing part
/// `i`'s landmarks, averaged over frames. Uniform attention gives `k/P` for
/// `k` covered patches.
pub fn part_mass(maps: &Tensor, landmarks: &[LandmarkFrame], encoder: &EncoderConfig) -> Result<Vec<f64>> {
    let [n, t, p] = *maps.shape() else {
        return Err(Error::dim("part_mass", format!("expected [N, T, P], got {:?}", maps.shape())));
    };
    if landmarks.len() != t {
        return Err(Error::Data(format!("{} landmark frames for {t} frames", landmarks.len())));
    }
    let mut out = Vec::with_capacity(n);
    for (q, part) in FacialPart::ORDER.into_iter().take(n).enumerate() {
        let mut total = 0.0;
        for (f, lm) in landmarks.iter().enumerate() {
            let mut patches: Vec<usize> = lm
                .part_points(part)
                .iter()
                .map(|&(x, y)| image_patch_index(x, y, encoder))
                .collect::<Result<_>>()?;
            patches.sort_unstable();
            patches.dedup();
            let row = &maps.data()[(q * t + f) * p..(q * t + f + 1) * p];
            total += patches.iter().map(|&i| row[i] as f64).sum::<f64>();
        }
        out.push(total / t as f64);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_scaling() {
        let bytes = to_pgm(&[0.0, 0.5, 1.0, 0.25], 2);
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 128, 255, 64]);
    }
}
