use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LANDMARK_COUNT: usize = 68;

/// Guided facial parts, in the fixed order used by queries and mined
/// attributes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FacialPart {
    Lips,
    Skin,
    Eyes,
    Nose,
}

impl FacialPart {
    pub const ORDER: [FacialPart; 4] = [FacialPart::Lips, FacialPart::Skin, FacialPart::Eyes, FacialPart::Nose];

    /// Indices into the 68-point landmark convention.
    pub fn landmark_range(self) -> std::ops::Range<usize> {
        match self {
            FacialPart::Lips => 48..68,
            // jawline plus brows
            FacialPart::Skin => 0..27,
            FacialPart::Eyes => 36..48,
            FacialPart::Nose => 27..36,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FacialPart::Lips => "lips",
            FacialPart::Skin => "skin",
            FacialPart::Eyes => "eyes",
            FacialPart::Nose => "nose",
        }
    }

    /// Text form of the grouping, recorded alongside mined attributes.
    pub fn grouping_description() -> String {
        FacialPart::ORDER
            .iter()
            .map(|p| {
                let r = p.landmark_range();
                format!("{}={}..{}", p.name(), r.start, r.end - 1)
            })
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// 68 landmark coordinates in aligned-frame pixel space.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkFrame {
    points: Vec<(f32, f32)>,
}

impl LandmarkFrame {
    pub fn new(points: Vec<(f32, f32)>, image_size: usize) -> Result<Self> {
        if points.len() != LANDMARK_COUNT {
            return Err(Error::Data(format!(
                "expected {LANDMARK_COUNT} landmarks, got {}",
                points.len()
            )));
        }
        let s = image_size as f32;
        if let Some((i, p)) = points
            .iter()
            .enumerate()
            .find(|(_, (x, y))| !(0.0..s).contains(x) || !(0.0..s).contains(y))
        {
            return Err(Error::Data(format!("landmark {i} at {:?} lies outside the {image_size}px frame", p)));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(f32, f32)] {
        &self.points
    }

    pub fn part_points(&self, part: FacialPart) -> &[(f32, f32)] {
        &self.points[part.landmark_range()]
    }

    /// Parses a landmark file: 68 lines of `x y` per frame, frames separated
    /// by blank lines.
    pub fn parse_file(text: &str, image_size: usize) -> Result<Vec<Self>> {
        let mut frames = Vec::new();
        let mut current = Vec::new();
        let mut flush = |current: &mut Vec<(f32, f32)>, line: usize| -> Result<()> {
            if !current.is_empty() {
                let pts = std::mem::take(current);
                frames.push(
                    Self::new(pts, image_size)
                        .map_err(|e| Error::Data(format!("landmark frame ending at line {line}: {e}")))?,
                );
            }
            Ok(())
        };
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                flush(&mut current, i)?;
                continue;
            }
            let mut it = line.split_whitespace();
            let parse = |tok: Option<&str>| -> Result<f32> {
                tok.and_then(|t| t.parse().ok())
                    .ok_or_else(|| Error::Data(format!("line {}: expected `x y`, got `{line}`", i + 1)))
            };
            let x = parse(it.next())?;
            let y = parse(it.next())?;
            if it.next().is_some() {
                return Err(Error::Data(format!("line {}: expected `x y`, got `{line}`", i + 1)));
            }
            current.push((x, y));
        }
        flush(&mut current, text.lines().count())?;
        Ok(frames)
    }

    pub fn to_text(frames: &[Self]) -> String {
        frames
            .iter()
            .map(|f| {
                f.points
                    .iter()
                    .map(|(x, y)| format!("{x} {y}\n"))
                    .collect::<String>()
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parts_partition_all_landmarks() {
        let mut seen = [false; LANDMARK_COUNT];
        for part in FacialPart::ORDER {
            for i in part.landmark_range() {
                assert!(!seen[i], "landmark {i} assigned twice");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn file_round_trip() {
        let a = LandmarkFrame::new((0..68).map(|i| (i as f32 * 0.25, 3.5)).collect(), 32).unwrap();
        let b = LandmarkFrame::new((0..68).map(|i| (1.0, i as f32 * 0.4)).collect(), 32).unwrap();
        let text = LandmarkFrame::to_text(&[a.clone(), b.clone()]);
        assert_eq!(LandmarkFrame::parse_file(&text, 32).unwrap(), vec![a, b]);
    }

    #[test]
    fn rejects_out_of_frame_points() {
        let mut pts: Vec<_> = (0..68).map(|_| (1.0, 1.0)).collect();
        pts[5] = (40.0, 1.0);
        assert!(LandmarkFrame::new(pts, 32).is_err());
    }
}
