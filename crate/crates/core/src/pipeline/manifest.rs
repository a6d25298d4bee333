//! Tab-separated dataset manifests.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, hash_str, streams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split `{other}` (expected train, val or test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub clip_path: PathBuf,
    /// `true` for fake.
    pub label: bool,
    pub video_id: String,
    pub split: Split,
    pub landmark_path: Option<PathBuf>,
    pub tag: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    /// Parses manifest text. Relative paths are resolved against `base`.
    /// With `check_paths`, every referenced file must exist.
    pub fn parse(text: &str, base: &Path, check_paths: bool) -> Result<Self> {
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if !(4..=6).contains(&fields.len()) {
                return Err(Error::Data(format!(
                    "manifest line {line_no}: expected 4 to 6 tab-separated fields, found {}",
                    fields.len()
                )));
            }
            let label = match fields[1] {
                "real" => false,
                "fake" => true,
                other => {
                    return Err(Error::Data(format!(
                        "manifest line {line_no}: unknown label `{other}` (expected real or fake)"
                    )))
                }
            };
            let split = fields[3]
                .parse()
                .map_err(|e| Error::Data(format!("manifest line {line_no}: {e}")))?;
            let resolve = |p: &str| -> Result<PathBuf> {
                let path = base.join(p);
                if check_paths && !path.exists() {
                    return Err(Error::Data(format!("manifest line {line_no}: `{}` does not exist", path.display())));
                }
                Ok(path)
            };
            let clip_path = resolve(fields[0])?;
            if !seen.insert(clip_path.clone()) {
                return Err(Error::Data(format!(
                    "manifest line {line_no}: duplicate clip path `{}`",
                    fields[0]
                )));
            }
            let opt = |k: usize| fields.get(k).map(|s| s.trim()).filter(|s| !s.is_empty());
            if fields[2].is_empty() {
                return Err(Error::Data(format!("manifest line {line_no}: empty video id")));
            }
            records.push(ManifestRecord {
                clip_path,
                label,
                video_id: fields[2].to_string(),
                split,
                landmark_path: opt(4).map(resolve).transpose()?,
                tag: opt(5).map(str::to_string),
            });
        }
        Ok(Self { records })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read manifest `{}`: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")), true)
    }

    pub fn to_text(&self, base: &Path) -> String {
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        let mut s = String::from("# clip_path\tlabel\tvideo_id\tsplit\tlandmarks\ttag\n");
        for r in &self.records {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                rel(&r.clip_path),
                if r.label { "fake" } else { "real" },
                r.video_id,
                r.split.as_str(),
                r.landmark_path.as_deref().map(rel).unwrap_or_default(),
                r.tag.as_deref().unwrap_or("")
            ));
        }
        s
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Distinct video ids in first-appearance order.
    pub fn video_ids(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .map(|r| r.video_id.as_str())
            .filter(|id| seen.insert(*id))
            .collect()
    }

    /// Keeps `⌈fraction·V⌉` videos, chosen by a seeded hash order of their
    /// ids. Smaller fractions select subsets of larger ones.
    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!("dataset fraction must be in (0, 1], got {fraction}")));
        }
        let mut ids = self.video_ids();
        ids.sort_by_key(|id| (derive_seed(seed, &[streams::SUBSAMPLE, hash_str(id)]), *id));
        let keep = (fraction * ids.len() as f64 - 1e-9).ceil() as usize;
        let kept: HashSet<&str> = ids.into_iter().take(keep).collect();
        Ok(Self {
            records: self.records.iter().filter(|r| kept.contains(r.video_id.as_str())).cloned().collect(),
        })
    }

    /// Drops fake records carrying `tag` from the train and val splits.
    pub fn exclude_tag(&self, tag: &str) -> Self {
        Self {
            records: self
                .records
                .iter()
                .filter(|r| !(r.label && r.split != Split::Test && r.tag.as_deref() == Some(tag)))
                .cloned()
                .collect(),
        }
    }
}
