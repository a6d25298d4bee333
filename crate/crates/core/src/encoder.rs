//! Frozen, forward-only ViT image encoder with per-layer attribute taps.
//!
//! Each pre-norm layer computes
//!
//! ```text
//! x̂ = LN1(x)
//! q, k, v = W_{Q,K,V} x̂ + B_{Q,K,V}        <- A_q, A_k, A_v tapped here
//! z = MHSA(q, k, v)
//! x' = x + W_O z + B_O
//! emb = x' + MLP(LN2(x'))                 <- P_l tapped here
//! ```
//!
//! Taps exclude the class token. Encoder weights never enter an autodiff
//! graph; decoder gradients stop at the taps.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::error::{Error, Result};
use crate::kernels;
use crate::rng::{rng_for, streams};
use crate::tensor::Tensor;

/// Which attention attribute a tap refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Attribute {
    Q,
    K,
    V,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Q, Attribute::K, Attribute::V];

    pub fn as_str(self) -> &'static str {
        match self {
            Attribute::Q => "q",
            Attribute::K => "k",
            Attribute::V => "v",
        }
    }
}

impl std::str::FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "q" => Ok(Attribute::Q),
            "k" => Ok(Attribute::K),
            "v" => Ok(Attribute::V),
            other => Err(Error::Config(format!("unknown attention attribute `{other}` (expected q, k or v)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Gelu,
    QuickGelu,
}

impl Activation {
    fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Gelu => kernels::gelu(x),
            Activation::QuickGelu => kernels::quick_gelu(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub mlp_dim: usize,
    pub activation: Activation,
    pub ln_eps: f64,
}

impl EncoderConfig {
    /// Desk-scale profile used by tests and the synthetic toyset.
    pub fn tiny() -> Self {
        Self {
            layers: 4,
            heads: 4,
            head_dim: 16,
            patch_size: 8,
            image_size: 32,
            mlp_dim: 256,
            activation: Activation::Gelu,
            ln_eps: 1e-5,
        }
    }

    /// ViT-L/14 at 224px. Head count must come from the checkpoint; the
    /// caller supplies it here for shape-only use.
    pub fn vit_l14(heads: usize) -> Self {
        Self {
            layers: 24,
            heads,
            head_dim: 1024 / heads,
            patch_size: 14,
            image_size: 224,
            mlp_dim: 4096,
            activation: Activation::QuickGelu,
            ln_eps: 1e-5,
        }
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patch_count(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.layers == 0 || self.heads == 0 || self.head_dim == 0 {
            return Err(Error::Config("encoder needs at least one layer, head and head dimension".into()));
        }
        Ok(())
    }
}

/// Row-major patch index of a pixel coordinate.
pub fn image_patch_index(x: f32, y: f32, config: &EncoderConfig) -> Result<usize> {
    let s = config.image_size as f32;
    if !(0.0..s).contains(&x) || !(0.0..s).contains(&y) {
        return Err(Error::Range(format!(
            "pixel ({x}, {y}) outside the {0}x{0} image",
            config.image_size
        )));
    }
    let ps = config.patch_size as f32;
    let col = (x / ps).floor() as usize;
    let row = (y / ps).floor() as usize;
    Ok(row * config.grid() + col)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

impl LayerWeights {
    const NAMES: [&'static str; 16] = [
        "ln1/gain", "ln1/bias", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2/gain", "ln2/bias", "mlp/w1",
        "mlp/b1", "mlp/w2", "mlp/b2",
    ];

    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.mlp_w1,
            &self.mlp_b1,
            &self.mlp_w2,
            &self.mlp_b2,
        ]
    }

    fn shapes(cfg: &EncoderConfig) -> [Vec<usize>; 16] {
        let (w, f) = (cfg.width(), cfg.mlp_dim);
        [
            vec![w],
            vec![w],
            vec![w, w],
            vec![w],
            vec![w, w],
            vec![w],
            vec![w, w],
            vec![w],
            vec![w, w],
            vec![w],
            vec![w],
            vec![w],
            vec![f, w],
            vec![f],
            vec![w, f],
            vec![w],
        ]
    }

    fn from_tensors(mut t: Vec<Tensor>) -> Self {
        let mut next = || t.remove(0);
        Self {
            ln1_gain: next(),
            ln1_bias: next(),
            wq: next(),
            bq: next(),
            wk: next(),
            bk: next(),
            wv: next(),
            bv: next(),
            wo: next(),
            bo: next(),
            ln2_gain: next(),
            ln2_bias: next(),
            mlp_w1: next(),
            mlp_b1: next(),
            mlp_w2: next(),
            mlp_b2: next(),
        }
    }
}

/// Immutable encoder weights plus the preprocessing constants recorded by
/// the exporter.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    pub config: EncoderConfig,
    pub patch_embed: Tensor,
    pub patch_bias: Option<Tensor>,
    pub class_token: Tensor,
    pub position: Tensor,
    pub ln_pre: Option<(Tensor, Tensor)>,
    pub layers: Vec<LayerWeights>,
    pub ln_post: (Tensor, Tensor),
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

/// Per-layer taps for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerAttributes {
    /// `T × P × H × D` each.
    pub a_q: Tensor,
    pub a_k: Tensor,
    pub a_v: Tensor,
    /// `T × P × (H·D)`.
    pub patches: Tensor,
}

impl LayerAttributes {
    pub fn attribute(&self, which: Attribute) -> &Tensor {
        match which {
            Attribute::Q => &self.a_q,
            Attribute::K => &self.a_k,
            Attribute::V => &self.a_v,
        }
    }

    pub fn frames(&self) -> usize {
        self.patches.shape()[0]
    }

    pub fn patch_count(&self) -> usize {
        self.patches.shape()[1]
    }

    pub fn heads(&self) -> usize {
        self.a_q.shape()[2]
    }

    pub fn head_dim(&self) -> usize {
        self.a_q.shape()[3]
    }

    /// Keeps only the frames at `indices` (in that order).
    pub fn select_frames(&self, indices: &[usize]) -> Result<Self> {
        let pick = |t: &Tensor| -> Result<Tensor> {
            let frames: Vec<Tensor> = indices.iter().map(|&i| t.slice_outer(i)).collect::<Result<_>>()?;
            Tensor::stack(&frames)
        };
        Ok(Self {
            a_q: pick(&self.a_q)?,
            a_k: pick(&self.a_k)?,
            a_v: pick(&self.a_v)?,
            patches: pick(&self.patches)?,
        })
    }
}

struct FrameTaps {
    // per layer: q, k, v, emb, each P × W (class row dropped)
    layers: Vec<[Vec<f32>; 4]>,
}

fn layer_prefix(l: usize) -> String {
    format!("layer{l}/")
}

impl EncoderWeights {
    /// Loads weights from a tensor archive, inferring the configuration from
    /// tensor shapes. The head count is read from the `encoder/heads`
    /// metadata entry unless `config` supplies it; a supplied `config` must
    /// agree with the archive.
    pub fn load(path: impl AsRef<Path>, config: Option<&EncoderConfig>) -> Result<Self> {
        Self::from_archive(&TensorArchive::load(path)?, config)
    }

    pub fn from_archive(ar: &TensorArchive, config: Option<&EncoderConfig>) -> Result<Self> {
        let class = ar.require("embed/class")?;
        let patch = ar.require("embed/patch")?;
        let position = ar.require("embed/position")?;
        let [width] = class.shape() else {
            return Err(Error::Load(format!("tensor `embed/class`: expected rank 1, found {:?}", class.shape())));
        };
        let width = *width;
        let patch_size = match patch.shape() {
            [w, 3, a, b] if *w == width && a == b => *a,
            other => {
                return Err(Error::Load(format!(
                    "tensor `embed/patch`: expected shape [{width}, 3, p, p], found {:?}",
                    other
                )))
            }
        };
        let tokens = match position.shape() {
            [n, w] if *w == width && *n >= 2 => *n,
            other => {
                return Err(Error::Load(format!(
                    "tensor `embed/position`: expected shape [P+1, {width}], found {:?}",
                    other
                )))
            }
        };
        let p = tokens - 1;
        let grid = (p as f64).sqrt().round() as usize;
        if grid * grid != p {
            return Err(Error::Load(format!("position table implies {p} patches, not a square grid")));
        }

        let layer_ids: BTreeSet<usize> = ar
            .names()
            .filter_map(|n| n.strip_prefix("layer"))
            .filter_map(|rest| rest.split('/').next())
            .filter_map(|id| id.parse().ok())
            .collect();
        let layers = layer_ids.len();
        if layers == 0 || layer_ids.iter().copied().ne(0..layers) {
            return Err(Error::Load(format!("layer groups must be numbered 0..L, found {:?}", layer_ids)));
        }

        let heads = match (config, ar.meta("encoder/heads")) {
            (Some(c), _) => c.heads,
            (None, Some(h)) => h
                .parse()
                .map_err(|_| Error::Load(format!("metadata `encoder/heads` is not an integer: {h}")))?,
            (None, None) => {
                return Err(Error::Load(
                    "head count missing: archive has no `encoder/heads` metadata and no config was given".into(),
                ))
            }
        };
        if heads == 0 || width % heads != 0 {
            return Err(Error::Load(format!("width {width} is not divisible by {heads} heads")));
        }
        let mlp_dim = ar.require("layer0/mlp/w1")?.shape().first().copied().unwrap_or(0);
        let activation = match ar.meta("encoder/activation") {
            None | Some("gelu") => Activation::Gelu,
            Some("quick_gelu") => Activation::QuickGelu,
            Some(other) => return Err(Error::Load(format!("unknown activation `{other}`"))),
        };
        let ln_eps = match ar.meta("encoder/ln_eps") {
            Some(e) => e.parse().map_err(|_| Error::Load(format!("bad ln_eps metadata `{e}`")))?,
            None => 1e-5,
        };
        let inferred = EncoderConfig {
            layers,
            heads,
            head_dim: width / heads,
            patch_size,
            image_size: grid * patch_size,
            mlp_dim,
            activation,
            ln_eps,
        };
        if let Some(c) = config {
            let mismatch = |what: &str, expected: usize, actual: usize| {
                Error::Load(format!("config {what}: expected {expected}, archive has {actual}"))
            };
            if c.layers != layers {
                return Err(mismatch("layers", c.layers, layers));
            }
            if c.width() != width {
                return Err(mismatch("width", c.width(), width));
            }
            if c.patch_size != patch_size {
                return Err(mismatch("patch_size", c.patch_size, patch_size));
            }
            if c.image_size != inferred.image_size {
                return Err(mismatch("image_size", c.image_size, inferred.image_size));
            }
        }
        let config = inferred;

        let mut layer_weights = Vec::with_capacity(layers);
        let shapes = LayerWeights::shapes(&config);
        for l in 0..layers {
            let prefix = layer_prefix(l);
            let tensors = LayerWeights::NAMES
                .iter()
                .zip(&shapes)
                .map(|(n, s)| ar.require_shape(&format!("{prefix}{n}"), s).cloned())
                .collect::<Result<Vec<_>>>()?;
            layer_weights.push(LayerWeights::from_tensors(tensors));
        }

        let pair = |g: &str, b: &str| -> Result<(Tensor, Tensor)> {
            Ok((ar.require_shape(g, &[width])?.clone(), ar.require_shape(b, &[width])?.clone()))
        };
        let ln_pre = match ar.get("ln_pre/gain") {
            Some(_) => Some(pair("ln_pre/gain", "ln_pre/bias")?),
            None => None,
        };
        let patch_bias = match ar.get("embed/patch_bias") {
            Some(_) => Some(ar.require_shape("embed/patch_bias", &[width])?.clone()),
            None => None,
        };
        let channel = |name: &str| -> Result<[f32; 3]> {
            let t = ar.require_shape(name, &[3])?;
            Ok([t.data()[0], t.data()[1], t.data()[2]])
        };
        Ok(Self {
            patch_embed: patch.clone(),
            patch_bias,
            class_token: class.clone(),
            position: position.clone(),
            ln_pre,
            layers: layer_weights,
            ln_post: pair("ln_post/gain", "ln_post/bias")?,
            mean: channel("preprocess/mean")?,
            std: channel("preprocess/std")?,
            config,
        })
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut ar = TensorArchive::new();
        ar.insert("embed/patch", self.patch_embed.clone());
        if let Some(b) = &self.patch_bias {
            ar.insert("embed/patch_bias", b.clone());
        }
        ar.insert("embed/class", self.class_token.clone());
        ar.insert("embed/position", self.position.clone());
        if let Some((g, b)) = &self.ln_pre {
            ar.insert("ln_pre/gain", g.clone());
            ar.insert("ln_pre/bias", b.clone());
        }
        for (l, lw) in self.layers.iter().enumerate() {
            for (name, t) in LayerWeights::NAMES.iter().zip(lw.tensors()) {
                ar.insert(format!("{}{name}", layer_prefix(l)), t.clone());
            }
        }
        ar.insert("ln_post/gain", self.ln_post.0.clone());
        ar.insert("ln_post/bias", self.ln_post.1.clone());
        ar.insert("preprocess/mean", Tensor::new(vec![3], self.mean.to_vec()).unwrap());
        ar.insert("preprocess/std", Tensor::new(vec![3], self.std.to_vec()).unwrap());
        ar.set_meta("encoder/heads", self.config.heads.to_string());
        ar.set_meta(
            "encoder/activation",
            match self.config.activation {
                Activation::Gelu => "gelu",
                Activation::QuickGelu => "quick_gelu",
            },
        );
        ar.set_meta("encoder/ln_eps", format!("{:e}", self.config.ln_eps));
        ar
    }

    /// Seeded random weights for a configuration. Used for desk-scale
    /// fixtures; scales keep activations O(1) through the stack.
    pub fn synthetic(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, &[streams::INIT, 0xe7c0]);
        let (w, f, ps) = (config.width(), config.mlp_dim, config.patch_size);
        let mut normal = |shape: Vec<usize>, std: f64| -> Tensor {
            let n: usize = shape.iter().product();
            let dist = Normal::new(0.0, std).unwrap();
            Tensor::new(shape, (0..n).map(|_| dist.sample(&mut rng) as f32).collect()).unwrap()
        };
        let patch_embed = normal(vec![w, 3, ps, ps], 1.0 / ((3 * ps * ps) as f64).sqrt());
        let class_token = normal(vec![w], 0.5);
        let position = normal(vec![config.patch_count() + 1, w], 0.5);
        let inv_w = 1.0 / (w as f64).sqrt();
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let gain = normal(vec![w], 0.1).map(|x| 1.0 + x);
            let gain2 = normal(vec![w], 0.1).map(|x| 1.0 + x);
            layers.push(LayerWeights {
                ln1_gain: gain,
                ln1_bias: normal(vec![w], 0.05),
                wq: normal(vec![w, w], inv_w),
                bq: normal(vec![w], 0.05),
                wk: normal(vec![w, w], inv_w),
                bk: normal(vec![w], 0.05),
                wv: normal(vec![w, w], inv_w),
                bv: normal(vec![w], 0.05),
                wo: normal(vec![w, w], 0.5 * inv_w),
                bo: normal(vec![w], 0.02),
                ln2_gain: gain2,
                ln2_bias: normal(vec![w], 0.05),
                mlp_w1: normal(vec![f, w], inv_w),
                mlp_b1: normal(vec![f], 0.05),
                mlp_w2: normal(vec![w, f], 0.5 / (f as f64).sqrt()),
                mlp_b2: normal(vec![w], 0.02),
            });
        }
        let ln_pre = Some((Tensor::ones(vec![w]), Tensor::zeros(vec![w])));
        // small jitter on normalization constants, recorded in the archive
        let jitter: f32 = rng.random_range(-0.01..0.01);
        Ok(Self {
            config: config.clone(),
            patch_embed,
            patch_bias: None,
            class_token,
            position,
            ln_pre,
            layers,
            ln_post: (Tensor::ones(vec![w]), Tensor::zeros(vec![w])),
            mean: [0.481_454_66 + jitter, 0.457_827_5, 0.408_210_73],
            std: [0.268_629_54, 0.261_302_6, 0.275_777_1],
        })
    }

    /// Maps `[0, 1]` RGB frames (`T × 3 × S × S`) through the stored
    /// per-channel mean/std.
    pub fn normalize(&self, frames: &Tensor) -> Result<Tensor> {
        let s = self.config.image_size;
        match frames.shape() {
            [_, 3, h, w] if *h == s && *w == s => {}
            other => {
                return Err(Error::dim(
                    "normalize",
                    format!("expected frames of shape [T, 3, {s}, {s}], got {:?}", other),
                ))
            }
        }
        let plane = s * s;
        let mut out = frames.clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            let c = (i / plane) % 3;
            *x = (*x - self.mean[c]) / self.std[c];
        }
        Ok(out)
    }

    /// Runs normalized frames `T × 3 × S × S` through every layer and
    /// returns one [`LayerAttributes`] per layer.
    pub fn encode_clip(&self, frames: &Tensor) -> Result<Vec<LayerAttributes>> {
        let cfg = &self.config;
        let s = cfg.image_size;
        let t = match frames.shape() {
            [t, 3, h, w] if *h == s && *w == s => *t,
            other => {
                return Err(Error::dim(
                    "encode_clip",
                    format!("frame size {:?} does not match encoder input [T, 3, {s}, {s}]", other),
                ))
            }
        };
        let frame_len = 3 * s * s;
        let taps: Vec<FrameTaps> = (0..t)
            .into_par_iter()
            .map(|i| self.encode_frame(&frames.data()[i * frame_len..(i + 1) * frame_len]))
            .collect();

        let (p, h, d, w) = (cfg.patch_count(), cfg.heads, cfg.head_dim, cfg.width());
        let mut out = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let gather = |which: usize| -> Vec<f32> {
                taps.iter().flat_map(|ft| ft.layers[l][which].iter().copied()).collect()
            };
            out.push(LayerAttributes {
                a_q: Tensor::new(vec![t, p, h, d], gather(0))?,
                a_k: Tensor::new(vec![t, p, h, d], gather(1))?,
                a_v: Tensor::new(vec![t, p, h, d], gather(2))?,
                patches: Tensor::new(vec![t, p, w], gather(3))?,
            });
        }
        Ok(out)
    }

    fn encode_frame(&self, img: &[f32]) -> FrameTaps {
        let cfg = &self.config;
        let (s, ps, grid, w) = (cfg.image_size, cfg.patch_size, cfg.grid(), cfg.width());
        let (p, n) = (cfg.patch_count(), cfg.patch_count() + 1);
        let k = 3 * ps * ps;

        // patch extraction: rows are patches, columns (channel, ky, kx)
        let mut patches = vec![0.0f32; p * k];
        for gy in 0..grid {
            for gx in 0..grid {
                let row = &mut patches[(gy * grid + gx) * k..(gy * grid + gx + 1) * k];
                for c in 0..3 {
                    for ky in 0..ps {
                        for kx in 0..ps {
                            row[(c * ps + ky) * ps + kx] = img[(c * s + gy * ps + ky) * s + gx * ps + kx];
                        }
                    }
                }
            }
        }
        let embedded = kernels::linear(
            &patches,
            self.patch_embed.data(),
            self.patch_bias.as_ref().map(|b| b.data()),
            p,
            k,
            w,
        );
        let mut x = Vec::with_capacity(n * w);
        x.extend_from_slice(self.class_token.data());
        x.extend_from_slice(&embedded);
        for (xi, pi) in x.iter_mut().zip(self.position.data()) {
            *xi += pi;
        }
        if let Some((g, b)) = &self.ln_pre {
            let src = x.clone();
            kernels::layer_norm(&src, g.data(), b.data(), cfg.ln_eps as f32, w, &mut x);
        }

        let mut layers = Vec::with_capacity(cfg.layers);
        for lw in &self.layers {
            let mut xhat = vec![0.0f32; n * w];
            kernels::layer_norm(&x, lw.ln1_gain.data(), lw.ln1_bias.data(), cfg.ln_eps as f32, w, &mut xhat);
            let q = kernels::linear(&xhat, lw.wq.data(), Some(lw.bq.data()), n, w, w);
            let k = kernels::linear(&xhat, lw.wk.data(), Some(lw.bk.data()), n, w, w);
            let v = kernels::linear(&xhat, lw.wv.data(), Some(lw.bv.data()), n, w, w);
            let z = self.self_attention(&q, &k, &v, n);
            let attn_out = kernels::linear(&z, lw.wo.data(), Some(lw.bo.data()), n, w, w);
            for (xi, o) in x.iter_mut().zip(&attn_out) {
                *xi += o;
            }
            let mut h = vec![0.0f32; n * w];
            kernels::layer_norm(&x, lw.ln2_gain.data(), lw.ln2_bias.data(), cfg.ln_eps as f32, w, &mut h);
            let mut hidden = kernels::linear(&h, lw.mlp_w1.data(), Some(lw.mlp_b1.data()), n, w, cfg.mlp_dim);
            hidden.iter_mut().for_each(|v| *v = cfg.activation.apply(*v));
            let mlp = kernels::linear(&hidden, lw.mlp_w2.data(), Some(lw.mlp_b2.data()), n, cfg.mlp_dim, w);
            for (xi, o) in x.iter_mut().zip(&mlp) {
                *xi += o;
            }
            layers.push([q[w..].to_vec(), k[w..].to_vec(), v[w..].to_vec(), x[w..].to_vec()]);
        }
        FrameTaps { layers }
    }

    /// Multi-head scaled-dot-product self-attention over `n` tokens.
    fn self_attention(&self, q: &[f32], k: &[f32], v: &[f32], n: usize) -> Vec<f32> {
        let (h, d, w) = (self.config.heads, self.config.head_dim, self.config.width());
        let scale = 1.0 / (d as f32).sqrt();
        let head = |m: &[f32], hi: usize| -> Vec<f32> {
            m.chunks(w).flat_map(|row| row[hi * d..(hi + 1) * d].iter().copied()).collect()
        };
        let mut z = vec![0.0f32; n * w];
        for hi in 0..h {
            let (qh, kh, vh) = (head(q, hi), head(k, hi), head(v, hi));
            let mut scores = vec![0.0f32; n * n];
            kernels::matmul_bt_acc(&qh, &kh, &mut scores, n, d, n);
            scores.iter_mut().for_each(|s| *s *= scale);
            let mut probs = vec![0.0f32; n * n];
            kernels::softmax(&scores, &mut probs, n, n, 1);
            let mut zh = vec![0.0f32; n * d];
            kernels::matmul_acc(&probs, &vh, &mut zh, n, n, d);
            for (r, row) in zh.chunks(d).enumerate() {
                z[r * w + hi * d..r * w + (hi + 1) * d].copy_from_slice(row);
            }
        }
        z
    }
}
