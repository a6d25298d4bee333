//! Synthetic desk-scale dataset with known separability.
//!
//! Real clips: a smoothly drifting low-frequency background and a synthetic
//! face (skin, eyes, nose, lips, 68 landmarks) moving on a straight line.
//! Fake clips (separable kind): the same plus independent per-frame
//! high-frequency flicker inside the face box. Fake clips (temporal-only
//! kind): a real clip with its frames shuffled, paired with the unshuffled
//! original, so only frame order separates the classes.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::Result;
use crate::pipeline::data::VideoSource;
use crate::pipeline::manifest::{DatasetManifest, ManifestRecord, Split};
use crate::pipeline::video::write_packed;
use crate::rng::{rng_for, streams, Rng};
use crate::spatial::LandmarkFrame;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToysetKind {
    Separable,
    TemporalOnly,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToysetConfig {
    pub kind: ToysetKind,
    pub train_videos: usize,
    pub val_videos: usize,
    pub test_videos: usize,
    pub frames: usize,
    pub fps: f64,
    pub size: usize,
    pub flicker: f32,
    pub seed: u64,
}

impl Default for ToysetConfig {
    fn default() -> Self {
        Self {
            kind: ToysetKind::Separable,
            train_videos: 64,
            val_videos: 16,
            test_videos: 16,
            frames: 10,
            fps: 5.0,
            size: 32,
            flicker: 0.12,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Toyset {
    pub train: Vec<VideoSource>,
    pub val: Vec<VideoSource>,
    pub test: Vec<VideoSource>,
}

struct Face {
    cx: f32,
    cy: f32,
    vx: f32,
    vy: f32,
    skin: [f32; 3],
}

fn face_landmarks(cx: f32, cy: f32, size: usize) -> Vec<(f32, f32)> {
    let mut p = Vec::with_capacity(68);
    let (a, b) = (8.0f32, 10.0f32);
    // jaw 0–16 along the lower half of the face outline
    for i in 0..17 {
        let th = std::f32::consts::PI * i as f32 / 16.0;
        p.push((cx - a * th.cos(), cy + b * th.sin() * 0.9));
    }
    // brows 17–26
    for i in 0..5 {
        p.push((cx - 6.0 + i as f32 * 1.2, cy - 5.5));
    }
    for i in 0..5 {
        p.push((cx + 1.2 + i as f32 * 1.2, cy - 5.5));
    }
    // nose 27–35: bridge then base
    for i in 0..4 {
        p.push((cx, cy - 3.0 + i as f32 * 1.2));
    }
    for i in 0..5 {
        p.push((cx - 2.0 + i as f32, cy + 2.0));
    }
    // eyes 36–47
    for ex in [cx - 3.5, cx + 3.5] {
        for i in 0..6 {
            let th = std::f32::consts::TAU * i as f32 / 6.0;
            p.push((ex + 1.5 * th.cos(), cy - 3.0 + 0.8 * th.sin()));
        }
    }
    // lips 48–67: outer then inner contour
    for i in 0..12 {
        let th = std::f32::consts::TAU * i as f32 / 12.0;
        p.push((cx + 3.0 * th.cos(), cy + 5.5 + 1.5 * th.sin()));
    }
    for i in 0..8 {
        let th = std::f32::consts::TAU * i as f32 / 8.0;
        p.push((cx + 2.0 * th.cos(), cy + 5.5 + 0.6 * th.sin()));
    }
    let hi = size as f32 - 1.0;
    p.into_iter().map(|(x, y)| (x.clamp(0.0, hi), y.clamp(0.0, hi))).collect()
}

fn render_clip(cfg: &ToysetConfig, rng: &mut Rng, flicker: bool) -> Result<(Tensor, Vec<LandmarkFrame>)> {
    let (s, t) = (cfg.size, cfg.frames);
    let plane = s * s;
    let c = s as f32 / 2.0;
    let face = Face {
        cx: c + rng.random_range(-2.0..2.0),
        cy: c + rng.random_range(-2.0..2.0),
        vx: rng.random_range(-0.3..0.3),
        vy: rng.random_range(-0.3..0.3),
        skin: [
            rng.random_range(0.7..0.9),
            rng.random_range(0.5..0.65),
            rng.random_range(0.4..0.55),
        ],
    };
    let waves: Vec<(f32, f32, f32, f32, [f32; 3])> = (0..2)
        .map(|_| {
            (
                rng.random_range(0.05..0.15) * std::f32::consts::TAU,
                rng.random_range(0.0..std::f32::consts::TAU),
                rng.random_range(0.0..std::f32::consts::TAU),
                rng.random_range(-0.3..0.3),
                [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)],
            )
        })
        .collect();
    let mut data = vec![0.0f32; t * 3 * plane];
    let mut landmarks = Vec::with_capacity(t);
    for f in 0..t {
        let (cx, cy) = (face.cx + face.vx * f as f32, face.cy + face.vy * f as f32);
        let frame = &mut data[f * 3 * plane..(f + 1) * 3 * plane];
        for y in 0..s {
            for x in 0..s {
                let (xf, yf) = (x as f32, y as f32);
                let mut rgb = [0.45f32, 0.45, 0.5];
                for &(freq, px, py, speed, amp) in &waves {
                    let v = (freq * xf + px + speed * f as f32).sin() * (freq * yf + py).cos();
                    for ch in 0..3 {
                        rgb[ch] += amp[ch] * v;
                    }
                }
                let (dx, dy) = (xf - cx, yf - cy);
                if (dx / 8.0).powi(2) + (dy / 10.0).powi(2) <= 1.0 {
                    rgb = face.skin;
                    let in_eye = |ex: f32| ((xf - ex) / 1.6).powi(2) + ((yf - (cy - 3.0)) / 0.9).powi(2) <= 1.0;
                    if in_eye(cx - 3.5) || in_eye(cx + 3.5) {
                        rgb = [0.1, 0.1, 0.15];
                    } else if dx.abs() <= 1.2 && (-3.0..=2.5).contains(&dy) {
                        rgb = [face.skin[0] * 0.8, face.skin[1] * 0.75, face.skin[2] * 0.75];
                    } else if (dx / 3.2).powi(2) + ((dy - 5.5) / 1.5).powi(2) <= 1.0 {
                        rgb = [0.7, 0.2, 0.25];
                    }
                }
                for ch in 0..3 {
                    frame[ch * plane + y * s + x] = rgb[ch].clamp(0.0, 1.0);
                }
            }
        }
        if flicker {
            let (x0, x1) = ((cx - 8.0).floor().max(0.0) as usize, ((cx + 8.0).ceil() as usize).min(s - 1));
            let (y0, y1) = ((cy - 10.0).floor().max(0.0) as usize, ((cy + 10.0).ceil() as usize).min(s - 1));
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let delta = if rng.random_bool(0.5) { cfg.flicker } else { -cfg.flicker };
                    for ch in 0..3 {
                        let v = &mut frame[ch * plane + y * s + x];
                        *v = (*v + delta).clamp(0.0, 1.0);
                    }
                }
            }
        }
        landmarks.push(LandmarkFrame::new(face_landmarks(cx, cy, s), s)?);
    }
    Ok((Tensor::new(vec![t, 3, s, s], data)?, landmarks))
}

fn source(split: Split, i: usize, suffix: &str, label: bool, frames: Tensor, lm: Vec<LandmarkFrame>, fps: f64) -> VideoSource {
    let id = format!("{}{i:03}{suffix}", split.as_str());
    VideoSource {
        key: format!("toyset/{id}"),
        video_id: id,
        label,
        frames: Arc::new(frames),
        fps,
        landmarks: Some(Arc::new(lm)),
        tag: Some(if label { "flicker".into() } else { "none".into() }),
    }
}

fn split_videos(cfg: &ToysetConfig, split: Split, count: usize) -> Result<Vec<VideoSource>> {
    let mut out = Vec::with_capacity(count);
    match cfg.kind {
        ToysetKind::Separable => {
            for i in 0..count {
                let mut rng = rng_for(cfg.seed, &[streams::TOYSET, split as u64, i as u64]);
                let label = i % 2 == 1;
                let (frames, lm) = render_clip(cfg, &mut rng, label)?;
                out.push(source(split, i, "", label, frames, lm, cfg.fps));
            }
        }
        ToysetKind::TemporalOnly => {
            for i in 0..count.div_ceil(2) {
                let mut rng = rng_for(cfg.seed, &[streams::TOYSET, split as u64, i as u64]);
                let (frames, lm) = render_clip(cfg, &mut rng, false)?;
                let mut order: Vec<usize> = (0..cfg.frames).collect();
                while order.iter().enumerate().all(|(a, &b)| a == b) && cfg.frames > 1 {
                    order.shuffle(&mut rng);
                }
                let shuffled = crate::pipeline::video::select_frames(&frames, &order)?;
                let shuffled_lm = order.iter().map(|&k| lm[k].clone()).collect();
                out.push(source(split, i, "r", false, frames, lm, cfg.fps));
                if out.len() < count {
                    out.push(source(split, i, "f", true, shuffled, shuffled_lm, cfg.fps));
                }
            }
        }
    }
    Ok(out)
}

pub fn generate(cfg: &ToysetConfig) -> Result<Toyset> {
    Ok(Toyset {
        train: split_videos(cfg, Split::Train, cfg.train_videos)?,
        val: split_videos(cfg, Split::Val, cfg.val_videos)?,
        test: split_videos(cfg, Split::Test, cfg.test_videos)?,
    })
}

/// Writes packed clips, landmark files and `manifest.tsv` under `dir`.
pub fn write_toyset(dir: &Path, toyset: &Toyset) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir.join("clips"))?;
    let mut records = Vec::new();
    for (split, videos) in [(Split::Train, &toyset.train), (Split::Val, &toyset.val), (Split::Test, &toyset.test)] {
        for v in videos {
            let clip = dir.join("clips").join(format!("{}.clip", v.video_id));
            write_packed(&clip, &v.frames)?;
            let lm_path = v.landmarks.as_ref().map(|lm| {
                let p = dir.join("clips").join(format!("{}.lm", v.video_id));
                std::fs::write(&p, LandmarkFrame::to_text(lm)).map(|_| p)
            });
            records.push(ManifestRecord {
                clip_path: clip,
                label: v.label,
                video_id: v.video_id.clone(),
                split,
                landmark_path: lm_path.transpose()?,
                tag: v.tag.clone(),
            });
        }
    }
    let manifest = DatasetManifest { records };
    std::fs::write(dir.join("manifest.tsv"), manifest.to_text(dir))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: ToysetKind) -> ToysetConfig {
        ToysetConfig { kind, train_videos: 4, val_videos: 2, test_videos: 2, ..Default::default() }
    }

    #[test]
    fn deterministic_and_balanced() {
        let a = generate(&small(ToysetKind::Separable)).unwrap();
        let b = generate(&small(ToysetKind::Separable)).unwrap();
        assert_eq!(a.train.len(), 4);
        assert_eq!(a.train.iter().filter(|v| v.label).count(), 2);
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.frames, y.frames);
        }
        assert!(a.train.iter().all(|v| v.frames.all_finite() && v.frames.data().iter().all(|p| (0.0..=1.0).contains(p))));
    }

    #[test]
    fn temporal_only_fakes_are_permutations_of_their_twin() {
        let t = generate(&small(ToysetKind::TemporalOnly)).unwrap();
        let (real, fake) = (&t.train[0], &t.train[1]);
        assert!(!real.label && fake.label);
        assert_ne!(real.frames, fake.frames);
        let mut a: Vec<u32> = real.frames.data().iter().map(|v| v.to_bits()).collect();
        let mut b: Vec<u32> = fake.frames.data().iter().map(|v| v.to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn written_toyset_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let t = generate(&small(ToysetKind::Separable)).unwrap();
        write_toyset(dir.path(), &t).unwrap();
        let m = DatasetManifest::load(dir.path().join("manifest.tsv")).unwrap();
        assert_eq!(m.records.len(), 8);
        let loaded = crate::pipeline::data::load_split(&m, Split::Train, 32, 5.0).unwrap();
        assert!(loaded[1].frames.max_abs_diff(&t.train[1].frames) <= 0.5 / 255.0 + 1e-6);
        assert_eq!(loaded[1].landmarks.as_ref().unwrap().len(), 10);
    }
}
