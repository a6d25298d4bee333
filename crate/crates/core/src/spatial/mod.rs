//! Facial-component-guided spatial branch.
//!
//! Each layer owns `N` learnable queries living in the attribute space of
//! the encoder. They cross-attend (per frame, per head, no learned
//! projections) over the tapped attribute `A_{l,γs}` as keys and the patch
//! embeddings as values; averaging the result over frames and queries gives
//! the layer's spatial embedding. The FCG loss ties query `i` to the mined
//! attribute of facial part `i` through an InfoNCE objective on cosines.

mod landmarks;
mod mining;

pub use landmarks::{FacialPart, LandmarkFrame, LANDMARK_COUNT};
pub use mining::{mine_facial_attributes, MiningAugment, MiningConfig, MiningSample};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::autodiff::{Graph, Var};
use crate::encoder::Attribute;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::taps::LayerTapVars;
use crate::tensor::{Scalar, Tensor};

/// Sign convention for the FCG objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FcgSign {
    /// Minimized negative log-likelihood of the matched part (InfoNCE).
    #[default]
    NegativeLog,
    /// The log-likelihood without a leading minus.
    AsPrinted,
}

/// Mined per-layer part attributes, rows ordered as [`FacialPart::ORDER`].
#[derive(Clone, Debug, PartialEq)]
pub struct FacialPartAttributes {
    /// One `4 × (H·D)` tensor per layer, unit-norm rows.
    pub phi: Vec<Tensor>,
    pub gamma: Attribute,
    pub seed: u64,
    pub rounds: usize,
}

impl FacialPartAttributes {
    pub fn layers(&self) -> usize {
        self.phi.len()
    }

    pub fn width(&self) -> usize {
        self.phi.first().map(|t| t.shape()[1]).unwrap_or(0)
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut ar = TensorArchive::new();
        for (l, t) in self.phi.iter().enumerate() {
            ar.insert(format!("fcg/phi/layer{l}"), t.clone());
        }
        ar.set_meta("fcg/seed", self.seed.to_string());
        ar.set_meta("fcg/rounds", self.rounds.to_string());
        ar.set_meta("fcg/gamma", self.gamma.as_str());
        ar.set_meta("fcg/parts", FacialPart::grouping_description());
        ar
    }

    pub fn from_archive(ar: &TensorArchive) -> Result<Self> {
        let mut phi = Vec::new();
        while let Some(t) = ar.get(&format!("fcg/phi/layer{}", phi.len())) {
            if t.rank() != 2 || t.shape()[0] != 4 {
                return Err(Error::Load(format!(
                    "tensor `fcg/phi/layer{}`: expected shape [4, C], found {:?}",
                    phi.len(),
                    t.shape()
                )));
            }
            phi.push(t.clone());
        }
        if phi.is_empty() {
            return Err(Error::Load("missing tensor `fcg/phi/layer0`".into()));
        }
        let meta = |k: &str| ar.meta(k).ok_or_else(|| Error::Load(format!("missing metadata `{k}`")));
        let parse_err = |k: &str| Error::Load(format!("malformed metadata `{k}`"));
        Ok(Self {
            phi,
            gamma: meta("fcg/gamma")?.parse()?,
            seed: meta("fcg/seed")?.parse().map_err(|_| parse_err("fcg/seed"))?,
            rounds: meta("fcg/rounds")?.parse().map_err(|_| parse_err("fcg/rounds"))?,
        })
    }
}

/// Initial queries for every layer: mined part attributes plus Gaussian
/// noise (σ = 0.02) when available, random unit vectors otherwise.
pub fn init_queries(
    layers: usize,
    n: usize,
    width: usize,
    phi: Option<&FacialPartAttributes>,
    rng: &mut Rng,
) -> Result<Vec<Tensor>> {
    let noise = Normal::new(0.0f64, 0.02).unwrap();
    let unit = Normal::new(0.0f64, 1.0).unwrap();
    (0..layers)
        .map(|l| {
            let data: Vec<f32> = match phi {
                Some(p) => {
                    let rows = p.phi.get(l).ok_or_else(|| {
                        Error::Config(format!("mined attributes cover {} layers, need {layers}", p.layers()))
                    })?;
                    if rows.shape()[1] != width || n > rows.shape()[0] {
                        return Err(Error::Config(format!(
                            "mined attributes {:?} incompatible with {n} queries of width {width}",
                            rows.shape()
                        )));
                    }
                    rows.data()[..n * width]
                        .iter()
                        .map(|&x| (x as f64 + noise.sample(rng)) as f32)
                        .collect()
                }
                None => {
                    let mut d: Vec<f64> = (0..n * width).map(|_| unit.sample(rng)).collect();
                    for row in d.chunks_mut(width) {
                        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                        row.iter_mut().for_each(|x| *x /= norm);
                    }
                    d.into_iter().map(|x| x as f32).collect()
                }
            };
            Tensor::new(vec![n, width], data)
        })
        .collect()
}

fn check_queries<T: Scalar>(g: &Graph<T>, queries: Var, taps: &LayerTapVars) -> Result<usize> {
    match g.shape(queries) {
        [n, c] if *c == taps.width() && *n >= 1 => Ok(*n),
        other => Err(Error::dim(
            "spatial",
            format!("queries must be [N, {}], got {:?}", taps.width(), other),
        )),
    }
}

/// Per-frame, per-head attention weights of the queries over patches:
/// `T × H × N × P`.
pub fn spatial_attention<T: Scalar>(g: &mut Graph<T>, queries: Var, taps: &LayerTapVars, gamma: Attribute) -> Result<Var> {
    let n = check_queries(g, queries, taps)?;
    let (h, d) = (taps.heads, taps.head_dim);
    let q = g.reshape(queries, &[n, h, d])?;
    let q = g.permute(q, &[1, 0, 2])?;
    let keys = taps.attribute(gamma)?;
    let keys = g.permute(keys, &[0, 2, 1, 3])?;
    g.attention_weights(q, keys)
}

/// Cross-attention output `M1`: `T × N × (H·D)`.
pub fn spatial_cross_attention<T: Scalar>(
    g: &mut Graph<T>,
    queries: Var,
    taps: &LayerTapVars,
    gamma: Attribute,
) -> Result<Var> {
    let n = check_queries(g, queries, taps)?;
    let (t, p, h, d) = (taps.frames, taps.patch_count, taps.heads, taps.head_dim);
    let weights = spatial_attention(g, queries, taps, gamma)?;
    let values = g.reshape(taps.patches, &[t, p, h, d])?;
    let values = g.permute(values, &[0, 2, 1, 3])?;
    let out = g.matmul(weights, values)?; // T × H × N × D
    let out = g.permute(out, &[0, 2, 1, 3])?;
    g.reshape(out, &[t, n, h * d])
}

/// Spatial embedding `e^s_l` of length `H·D`: the cross-attention output
/// averaged over frames and queries.
pub fn spatial_forward<T: Scalar>(g: &mut Graph<T>, queries: Var, taps: &LayerTapVars, gamma: Attribute) -> Result<Var> {
    let m1 = spatial_cross_attention(g, queries, taps, gamma)?;
    let shape = g.shape(m1).to_vec();
    let flat = g.reshape(m1, &[shape[0] * shape[1], shape[2]])?;
    g.mean_axis(flat, 0)
}

/// FCG loss over all layers. `queries[l]` is `N × C` with `1 ≤ N ≤ 4`;
/// query `i` is matched against part `i` among the first `N` parts.
pub fn fcg_loss<T: Scalar>(g: &mut Graph<T>, queries: &[Var], phi: &[Tensor<T>], tau: f64, sign: FcgSign) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("FCG temperature must be positive, got {tau}")));
    }
    if queries.is_empty() || queries.len() != phi.len() {
        return Err(Error::Config(format!(
            "FCG needs one query set per mined layer ({} queries, {} layers)",
            queries.len(),
            phi.len()
        )));
    }
    let mut terms = Vec::with_capacity(queries.len());
    for (&q, parts) in queries.iter().zip(phi) {
        let [n, c] = g.shape(q) else {
            return Err(Error::dim("fcg_loss", format!("queries must be rank 2, got {:?}", g.shape(q))));
        };
        let (n, c) = (*n, *c);
        if !(1..=4).contains(&n) || parts.shape() != [4, c] {
            return Err(Error::Config(format!(
                "FCG requires 1..=4 queries matching mined attributes [4, {c}]; got {n} queries and {:?}",
                parts.shape()
            )));
        }
        let guided = Tensor::new(vec![n, c], parts.data()[..n * c].to_vec())?;
        let guided = g.constant(guided);
        let guided = g.l2_normalize(guided, 1)?;
        let qn = g.l2_normalize(q, 1)?;
        let gt = g.transpose(guided)?;
        let cos = g.matmul(qn, gt)?;
        let logits = g.scale(cos, tau)?;
        let log_probs = g.log_softmax(logits, 1)?;
        let diagonal: Vec<usize> = (0..n).map(|i| i * n + i).collect();
        terms.push(g.gather(log_probs, &diagonal, &[n])?);
    }
    let all = g.concat(&terms, 0)?;
    let mean = g.mean_all(all)?;
    match sign {
        FcgSign::NegativeLog => g.neg(mean),
        FcgSign::AsPrinted => Ok(mean),
    }
}
