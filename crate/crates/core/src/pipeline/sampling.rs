//! Clip sampling: `T` uniformly spaced frames from a 2–4 s window, with
//! non-overlapping windows for repeated draws from one video.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingConfig {
    pub frames: usize,
    pub min_seconds: f64,
    pub max_seconds: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { frames: 10, min_seconds: 2.0, max_seconds: 4.0 }
    }
}

/// `T` indices spaced uniformly over `[start, start + len)`.
pub fn uniform_indices(start: usize, len: usize, t: usize) -> Vec<usize> {
    (0..t).map(|i| start + i * len / t).collect()
}

/// Draws up to `count` disjoint windows from a `total`-frame video and
/// returns each window's frame indices. Videos shorter than the minimum
/// window use their full span.
pub fn sample_windows(total: usize, fps: f64, count: usize, config: &SamplingConfig, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    let t = config.frames;
    if total < t {
        return Err(Error::Sampling(format!("video has {total} frames, fewer than the {t} required")));
    }
    if !(fps > 0.0) || !(config.min_seconds > 0.0) || config.max_seconds < config.min_seconds {
        return Err(Error::Config(format!(
            "invalid sampling setup: fps {fps}, window {}–{} s",
            config.min_seconds, config.max_seconds
        )));
    }
    let lo = ((config.min_seconds * fps).round() as usize).clamp(t, total);
    let hi = ((config.max_seconds * fps).round() as usize).clamp(lo, total);
    let mut taken: Vec<(usize, usize)> = Vec::new();
    let mut out = Vec::new();
    for _ in 0..count {
        let len = rng.random_range(lo..=hi);
        // free gaps between already chosen windows
        let mut sorted = taken.clone();
        sorted.sort_unstable();
        let mut gaps = Vec::new();
        let mut cursor = 0;
        for &(s, l) in sorted.iter().chain(std::iter::once(&(total, 0))) {
            if s >= cursor + len {
                gaps.push((cursor, s - cursor - len + 1));
            }
            cursor = cursor.max(s + l);
        }
        let slots: usize = gaps.iter().map(|g| g.1).sum();
        if slots == 0 {
            break;
        }
        let mut pick = rng.random_range(0..slots);
        let start = gaps
            .iter()
            .find_map(|&(s, n)| if pick < n { Some(s + pick) } else { pick -= n; None })
            .expect("pick within slots");
        taken.push((start, len));
        out.push(uniform_indices(start, len, t));
    }
    Ok(out)
}
