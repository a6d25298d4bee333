//! Data ingestion, sampling, augmentation, perturbations, metrics and
//! training.

pub mod affinity;
pub mod augment;
pub mod config;
pub mod data;
pub mod manifest;
pub mod metrics;
pub mod perturb;
pub mod sampling;
pub mod toyset;
pub mod train;
pub mod video;

pub use config::TrainConfig;
pub use data::VideoSource;
pub use manifest::{DatasetManifest, ManifestRecord, Split};
pub use train::{EarlyStopping, EpochRecord, History, TrainOutcome, Trainer};
