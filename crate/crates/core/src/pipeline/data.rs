//! In-memory videos ready for sampling, loaded from manifests or generated.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::pipeline::manifest::{DatasetManifest, ManifestRecord, Split};
use crate::pipeline::video::{load_clip, resize_frames};
use crate::spatial::{LandmarkFrame, MiningSample};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct VideoSource {
    /// Groups clips for video-level scoring.
    pub video_id: String,
    /// Unique per source; keys random streams and the tap cache.
    pub key: String,
    /// `true` for fake.
    pub label: bool,
    /// `F × 3 × S × S` in `[0, 1]`.
    pub frames: Arc<Tensor>,
    pub fps: f64,
    pub landmarks: Option<Arc<Vec<LandmarkFrame>>>,
    pub tag: Option<String>,
}

impl VideoSource {
    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }

    /// Loads one manifest record, resizing frames (and landmarks) to `size`.
    pub fn from_record(record: &ManifestRecord, size: usize, fps: f64) -> Result<Self> {
        let raw = load_clip(&record.clip_path)?;
        let (h, w) = (raw.shape()[2], raw.shape()[3]);
        let frames = resize_frames(&raw, size)?;
        let landmarks = match &record.landmark_path {
            None => None,
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Data(format!("cannot read landmarks `{}`: {e}", p.display())))?;
                let parsed = LandmarkFrame::parse_file(&text, h.max(w))?;
                let (sx, sy) = (size as f32 / w as f32, size as f32 / h as f32);
                let hi = size as f32 - 1e-3;
                let scaled = parsed
                    .into_iter()
                    .map(|f| {
                        let pts = f
                            .points()
                            .iter()
                            .map(|&(x, y)| (((x + 0.5) * sx - 0.5).clamp(0.0, hi), ((y + 0.5) * sy - 0.5).clamp(0.0, hi)))
                            .collect();
                        LandmarkFrame::new(pts, size)
                    })
                    .collect::<Result<Vec<_>>>()?;
                if scaled.len() != frames.shape()[0] {
                    return Err(Error::Data(format!(
                        "`{}`: {} landmark frames for {} video frames",
                        p.display(),
                        scaled.len(),
                        frames.shape()[0]
                    )));
                }
                Some(Arc::new(scaled))
            }
        };
        Ok(Self {
            video_id: record.video_id.clone(),
            key: record.clip_path.display().to_string(),
            label: record.label,
            frames: Arc::new(frames),
            fps,
            landmarks,
            tag: record.tag.clone(),
        })
    }

    /// Up to `max_frames` evenly spaced frames with landmarks, for mining.
    pub fn mining_sample(&self, max_frames: usize) -> Option<Result<MiningSample>> {
        let lm = self.landmarks.as_ref()?;
        let n = self.frame_count();
        let take = max_frames.clamp(1, n);
        let idx: Vec<usize> = (0..take).map(|i| i * n / take).collect();
        Some((|| {
            Ok(MiningSample {
                frames: crate::pipeline::video::select_frames(&self.frames, &idx)?,
                landmarks: idx.iter().map(|&i| lm[i].clone()).collect(),
            })
        })())
    }
}

pub fn load_split(manifest: &DatasetManifest, split: Split, size: usize, fps: f64) -> Result<Vec<VideoSource>> {
    manifest
        .split(split)
        .into_iter()
        .map(|r| VideoSource::from_record(r, size, fps))
        .collect()
}
