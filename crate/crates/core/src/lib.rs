//! Parameter-efficient deepfake video detection with a side network on a
//! frozen ViT image encoder.
//!
//! The frozen encoder ([`encoder`]) exposes per-layer attention attributes
//! and patch embeddings. A small trainable decoder consumes them through a
//! facial-component-guided spatial branch ([`spatial`]) and a patch-temporal
//! branch ([`temporal`]); [`detector`] combines both into three
//! classification heads. [`pipeline`] covers data, training and evaluation.

pub mod archive;
pub mod autodiff;
pub mod detector;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod imageops;
pub mod kernels;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod spatial;
pub mod taps;
pub mod tensor;
pub mod temporal;

pub use error::{Error, Result};
