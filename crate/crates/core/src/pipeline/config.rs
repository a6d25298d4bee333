//! Training configuration and its `key = value` text form.

use serde::{Deserialize, Serialize};

use crate::detector::{Aggregation, DetectorConfig};
use crate::encoder::{Attribute, EncoderConfig};
use crate::error::{Error, Result};
use crate::optim::AdamWConfig;
use crate::spatial::FcgSign;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub fcg_weight: f64,
    pub focal_gamma: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub gamma_s: Attribute,
    pub gamma_set: Vec<Attribute>,
    pub queries: usize,
    pub dataset_fraction: f64,
    pub loo_exclusion: Option<String>,
    pub use_spatial: bool,
    pub use_temporal: bool,
    pub use_fcg: bool,
    pub share_temporal_weights: bool,
    pub aggregation: Aggregation,
    pub fcg_sign: FcgSign,
    pub frames: usize,
    /// Frame rate assumed for stored clips.
    pub fps: f64,
    pub clips_per_video: usize,
    pub augment: bool,
    pub mining_rounds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-3,
            eps: 1e-8,
            fcg_weight: 0.15,
            focal_gamma: 4.0,
            epochs: 30,
            patience: 10,
            batch_size: 8,
            tau: 10.0,
            gamma_s: Attribute::K,
            gamma_set: Attribute::ALL.to_vec(),
            queries: 4,
            dataset_fraction: 1.0,
            loo_exclusion: None,
            use_spatial: true,
            use_temporal: true,
            use_fcg: true,
            share_temporal_weights: false,
            aggregation: Aggregation::Mean,
            fcg_sign: FcgSign::NegativeLog,
            frames: 10,
            fps: 25.0,
            clips_per_video: 4,
            augment: true,
            mining_rounds: 32,
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Some(true),
        "false" | "no" | "off" | "0" => Some(false),
        _ => None,
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            eps: self.eps,
        }
    }

    pub fn detector_config(&self, encoder: &EncoderConfig) -> DetectorConfig {
        DetectorConfig {
            queries: self.queries,
            spatial_gamma: self.gamma_s,
            temporal_gammas: self.gamma_set.clone(),
            use_spatial: self.use_spatial,
            use_temporal: self.use_temporal,
            share_temporal_weights: self.share_temporal_weights,
            aggregation: self.aggregation,
            use_fcg: self.use_fcg,
            tau: self.tau,
            fcg_weight: self.fcg_weight,
            fcg_sign: self.fcg_sign,
            focal_gamma: self.focal_gamma,
            ..DetectorConfig::for_encoder(encoder, self.frames)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.epochs == 0 || self.clips_per_video == 0 || self.frames == 0 {
            return bad("batch_size, epochs, clips_per_video and frames must be positive".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.dataset_fraction > 0.0 && self.dataset_fraction <= 1.0) {
            return bad(format!("dataset_fraction must be in (0, 1], got {}", self.dataset_fraction));
        }
        if !(self.fps > 0.0) {
            return bad(format!("fps must be positive, got {}", self.fps));
        }
        Ok(())
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
        }
        let flag = |v: &str| parse_bool(v).ok_or_else(|| Error::Config(format!("`{key}`: expected true or false, got `{v}`")));
        match key {
            "seed" => self.seed = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "eps" => self.eps = num(key, value)?,
            "w_fcg" | "fcg_weight" => self.fcg_weight = num(key, value)?,
            "focal_gamma" => self.focal_gamma = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "gamma_s" => self.gamma_s = value.parse()?,
            "gamma_set" => {
                self.gamma_set = value
                    .split(',')
                    .map(|s| s.trim().parse())
                    .collect::<Result<_>>()?;
            }
            "queries" => self.queries = num(key, value)?,
            "dataset_fraction" => self.dataset_fraction = num(key, value)?,
            "loo_exclusion" => self.loo_exclusion = Some(value.to_string()).filter(|s| !s.is_empty()),
            "use_spatial" => self.use_spatial = flag(value)?,
            "use_temporal" => self.use_temporal = flag(value)?,
            "use_fcg" => self.use_fcg = flag(value)?,
            "share_temporal_weights" => self.share_temporal_weights = flag(value)?,
            "aggregation" => {
                self.aggregation = match value {
                    "mean" => Aggregation::Mean,
                    "sum" => Aggregation::Sum,
                    other => return Err(Error::Config(format!("`aggregation`: expected mean or sum, got `{other}`"))),
                }
            }
            "fcg_sign" => {
                self.fcg_sign = match value {
                    "negative_log" => FcgSign::NegativeLog,
                    "as_printed" => FcgSign::AsPrinted,
                    other => {
                        return Err(Error::Config(format!(
                            "`fcg_sign`: expected negative_log or as_printed, got `{other}`"
                        )))
                    }
                }
            }
            "frames" => self.frames = num(key, value)?,
            "fps" => self.fps = num(key, value)?,
            "clips_per_video" => self.clips_per_video = num(key, value)?,
            "augment" => self.augment = flag(value)?,
            "mining_rounds" => self.mining_rounds = num(key, value)?,
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected `key = value`", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("config line {}: {e}", i + 1)))?;
        }
        self.validate()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config `{}`: {e}", path.display())))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_settings() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.weight_decay, c.fcg_weight, c.focal_gamma), (1e-4, 1e-3, 0.15, 4.0));
        assert_eq!((c.epochs, c.patience, c.frames), (30, 10, 10));
        assert_eq!(c.gamma_s, Attribute::K);
        assert_eq!(c.gamma_set, Attribute::ALL.to_vec());
    }

    #[test]
    fn parses_text() {
        let c = TrainConfig::from_text("# comment\nlr = 0.001\ngamma_set = q, v\nuse_temporal = false # inline\nloo_exclusion = df\n").unwrap();
        assert_eq!(c.lr, 1e-3);
        assert_eq!(c.gamma_set, vec![Attribute::Q, Attribute::V]);
        assert!(!c.use_temporal);
        assert_eq!(c.loo_exclusion.as_deref(), Some("df"));
    }

    #[test]
    fn errors_name_the_line() {
        let e = TrainConfig::from_text("lr = 1e-4\nbogus = 3\n").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        assert!(matches!(TrainConfig::from_text("dataset_fraction = 0"), Err(Error::Config(_))));
    }
}
