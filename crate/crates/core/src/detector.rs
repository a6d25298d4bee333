//! Decoder assembly: layer aggregation, normalization, the three heads, the
//! training objective, and checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::autodiff::{Graph, Var};
use crate::encoder::{Attribute, EncoderConfig, LayerAttributes};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{rng_for, streams};
use crate::spatial::{fcg_loss, init_queries, spatial_forward, FacialPartAttributes, FcgSign};
use crate::taps::{bind_taps, LayerTapVars};
use crate::temporal::{temporal_forward, temporal_param_shapes, TemporalVars};
use crate::tensor::{Scalar, Tensor};

/// Trainable parameter count quoted in the literature for this decoder.
pub const PUBLISHED_PARAMETER_COUNT: &str = "250.0K";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub patch_count: usize,
    pub frames: usize,
    /// Spatial queries per layer (`N`).
    pub queries: usize,
    pub spatial_gamma: Attribute,
    pub temporal_gammas: Vec<Attribute>,
    pub use_spatial: bool,
    pub use_temporal: bool,
    pub share_temporal_weights: bool,
    pub aggregation: Aggregation,
    pub ln_eps: f64,
    pub use_fcg: bool,
    pub tau: f64,
    pub fcg_weight: f64,
    pub fcg_sign: FcgSign,
    pub focal_gamma: f64,
}

impl DetectorConfig {
    pub fn for_encoder(encoder: &EncoderConfig, frames: usize) -> Self {
        Self {
            layers: encoder.layers,
            heads: encoder.heads,
            head_dim: encoder.head_dim,
            patch_count: encoder.patch_count(),
            frames,
            queries: 4,
            spatial_gamma: Attribute::K,
            temporal_gammas: Attribute::ALL.to_vec(),
            use_spatial: true,
            use_temporal: true,
            share_temporal_weights: false,
            aggregation: Aggregation::Mean,
            ln_eps: 1e-5,
            use_fcg: true,
            tau: 10.0,
            fcg_weight: 0.15,
            fcg_sign: FcgSign::NegativeLog,
            focal_gamma: 4.0,
        }
    }

    /// ViT-L/14 with 16 heads and 10 frames per clip.
    pub fn vit_l14(share_temporal_weights: bool) -> Self {
        Self { share_temporal_weights, ..Self::for_encoder(&EncoderConfig::vit_l14(16), 10) }
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn grid(&self) -> usize {
        (self.patch_count as f64).sqrt().round() as usize
    }

    /// Attributes the enabled modules read from the encoder.
    pub fn needed_attributes(&self) -> Vec<Attribute> {
        let mut v = Vec::new();
        if self.use_spatial {
            v.push(self.spatial_gamma);
        }
        if self.use_temporal {
            v.extend(&self.temporal_gammas);
        }
        v.sort();
        v.dedup();
        v
    }

    pub fn temporal_modules(&self) -> usize {
        match (self.use_temporal, self.share_temporal_weights) {
            (false, _) => 0,
            (true, true) => 1,
            (true, false) => self.layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.use_spatial && !self.use_temporal {
            return Err(Error::Config("both spatial and temporal modules are disabled".into()));
        }
        if self.layers == 0 || self.heads == 0 || self.head_dim == 0 || self.frames == 0 {
            return Err(Error::Config("layers, heads, head_dim and frames must be positive".into()));
        }
        if self.use_spatial && !(1..=4).contains(&self.queries) {
            return Err(Error::Config(format!("query count must be in 1..=4, got {}", self.queries)));
        }
        if self.use_temporal {
            if self.temporal_gammas.is_empty() {
                return Err(Error::Config("temporal module needs at least one attribute".into()));
            }
            let g = self.grid();
            if g * g != self.patch_count {
                return Err(Error::Config(format!("patch count {} is not a square grid", self.patch_count)));
            }
        }
        if self.use_fcg && !(self.tau > 0.0) {
            return Err(Error::Config(format!("FCG temperature must be positive, got {}", self.tau)));
        }
        if !(self.fcg_weight >= 0.0) || !(self.focal_gamma >= 0.0) {
            return Err(Error::Config("FCG weight and focal gamma must be non-negative".into()));
        }
        Ok(())
    }

    /// Names and shapes of every trainable tensor, in canonical order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (c, p) = (self.width(), self.patch_count);
        let mut out = Vec::new();
        if self.use_spatial {
            for l in 0..self.layers {
                out.push((format!("spatial/layer{l}/queries"), vec![self.queries, c]));
            }
        }
        for m in 0..self.temporal_modules() {
            let prefix = if self.share_temporal_weights { "temporal/shared".to_string() } else { format!("temporal/layer{m}") };
            for (name, shape) in temporal_param_shapes(self.temporal_gammas.len(), self.heads, self.frames) {
                out.push((format!("{prefix}/{name}"), shape));
            }
        }
        if self.use_temporal {
            out.push(("norm_t/gain".into(), vec![p]));
            out.push(("norm_t/bias".into(), vec![p]));
            out.push(("head_t/weight".into(), vec![1, p]));
            out.push(("head_t/bias".into(), vec![1]));
        }
        if self.use_spatial {
            out.push(("norm_s/gain".into(), vec![c]));
            out.push(("norm_s/bias".into(), vec![c]));
            out.push(("head_s/weight".into(), vec![1, c]));
            out.push(("head_s/bias".into(), vec![1]));
        }
        if self.use_spatial && self.use_temporal {
            out.push(("head_st/weight".into(), vec![1, p + c]));
            out.push(("head_st/bias".into(), vec![1]));
        }
        out
    }

    /// Closed-form trainable parameter count.
    pub fn analytic_parameter_count(&self) -> ParameterBreakdown {
        let (c, p, l) = (self.width(), self.patch_count, self.layers);
        let tt = self.frames * self.frames;
        let k2 = crate::temporal::TEMPORAL_KERNEL.pow(2);
        let m = self.temporal_modules();
        let (sp, tp) = (self.use_spatial as usize, self.use_temporal as usize);
        ParameterBreakdown {
            queries: sp * l * self.queries * c,
            temporal_conv1: m * (self.temporal_gammas.len() * self.heads * k2 + 1),
            temporal_mix: m * (tt * tt + tt),
            temporal_conv2: m * (tt * k2 + 1),
            norms_and_heads: tp * (2 * p + p + 1) + sp * (2 * c + c + 1) + sp * tp * (p + c + 1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParameterBreakdown {
    pub queries: usize,
    pub temporal_conv1: usize,
    pub temporal_mix: usize,
    pub temporal_conv2: usize,
    pub norms_and_heads: usize,
}

impl ParameterBreakdown {
    pub fn total(&self) -> usize {
        self.queries + self.temporal_conv1 + self.temporal_mix + self.temporal_conv2 + self.norms_and_heads
    }
}

fn thousands(n: usize) -> String {
    format!("{:.1}K", n as f64 / 1000.0)
}

/// Human-readable trainable-parameter report for `config`, followed by the
/// shared/per-layer comparison against the published figure.
pub fn parameter_report(config: &DetectorConfig) -> String {
    let b = config.analytic_parameter_count();
    let mut s = String::new();
    let mode = if config.share_temporal_weights { "shared" } else { "per-layer" };
    let _ = writeln!(s, "trainable parameters (encoder weights excluded, temporal weights {mode})");
    let _ = writeln!(s, "  spatial queries      {:>10}", b.queries);
    let _ = writeln!(s, "  temporal conv C1     {:>10}", b.temporal_conv1);
    let _ = writeln!(s, "  temporal mix W       {:>10}", b.temporal_mix);
    let _ = writeln!(s, "  temporal conv C2     {:>10}", b.temporal_conv2);
    let _ = writeln!(s, "  norms and heads      {:>10}", b.norms_and_heads);
    let _ = writeln!(s, "  total                {:>10} ({})", b.total(), thousands(b.total()));
    let _ = writeln!(s, "comparison with the published figure of {PUBLISHED_PARAMETER_COUNT}:");
    for shared in [false, true] {
        let cfg = DetectorConfig { share_temporal_weights: shared, ..config.clone() };
        let n = cfg.analytic_parameter_count().total();
        let label = if shared { "shared temporal weights   " } else { "per-layer temporal weights" };
        let _ = writeln!(s, "  {label} {:>10} ({}) vs published {PUBLISHED_PARAMETER_COUNT}", n, thousands(n));
    }
    s
}

/// Trainable tensors, in [`DetectorConfig::parameter_shapes`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl DetectorParams {
    /// Seeded initialization. Queries start at the mined part attributes
    /// (plus small noise) when FCG is enabled.
    pub fn init(config: &DetectorConfig, phi: Option<&FacialPartAttributes>, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.use_spatial && config.use_fcg && phi.is_none() {
            return Err(Error::Config("FCG is enabled but no mined part attributes were supplied".into()));
        }
        let mut queries = if config.use_spatial {
            let mut rng = rng_for(seed, &[streams::INIT, 0]);
            let phi = if config.use_fcg { phi } else { None };
            init_queries(config.layers, config.queries, config.width(), phi, &mut rng)?
        } else {
            Vec::new()
        }
        .into_iter();
        let mut rng = rng_for(seed, &[streams::INIT, 1]);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in config.parameter_shapes() {
            let t = if name.ends_with("/queries") {
                queries.next().expect("one query set per layer")
            } else if name.ends_with("/gain") {
                Tensor::ones(shape)
            } else if name.ends_with("bias") {
                Tensor::zeros(shape)
            } else {
                // fan-in uniform, as for standard linear / conv layers
                let fan_in: usize = shape[1..].iter().product();
                let bound = 1.0 / (fan_in as f32).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).unwrap();
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| dist.sample(&mut rng)).collect())?
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Self { names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Runtime enumeration of trainable scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Stores every tensor as `{prefix}{name}`.
    pub fn write_archive(&self, ar: &mut TensorArchive, prefix: &str) {
        for (n, t) in self.names.iter().zip(&self.tensors) {
            ar.insert(format!("{prefix}{n}"), t.clone());
        }
    }

    pub fn read_archive(config: &DetectorConfig, ar: &TensorArchive, prefix: &str) -> Result<Self> {
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in config.parameter_shapes() {
            tensors.push(ar.require_shape(&format!("{prefix}{name}"), &shape)?.clone());
            names.push(name);
        }
        Ok(Self { names, tensors })
    }

    /// Adds every tensor to `g` as a trainable leaf.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, config: &DetectorConfig) -> Result<DetectorVars> {
        let vars: Vec<Var> = self.tensors.iter().map(|t| g.param(t.cast::<T>())).collect();
        DetectorVars::from_vars(config, vars)
    }
}

/// Graph handles for [`DetectorParams`]; `all` follows the parameter order.
#[derive(Clone, Debug)]
pub struct DetectorVars {
    pub all: Vec<Var>,
    pub queries: Vec<Var>,
    pub temporal: Vec<TemporalVars>,
    pub norm_t: Option<(Var, Var)>,
    pub head_t: Option<(Var, Var)>,
    pub norm_s: Option<(Var, Var)>,
    pub head_s: Option<(Var, Var)>,
    pub head_st: Option<(Var, Var)>,
}

impl DetectorVars {
    /// Splits handles given in [`DetectorConfig::parameter_shapes`] order.
    pub fn from_vars(config: &DetectorConfig, vars: Vec<Var>) -> Result<Self> {
        let expected = config.parameter_shapes().len();
        if vars.len() != expected {
            return Err(Error::Config(format!("expected {expected} parameter tensors, got {}", vars.len())));
        }
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("length checked");
        let queries = if config.use_spatial { (0..config.layers).map(|_| next()).collect() } else { Vec::new() };
        let temporal = (0..config.temporal_modules())
            .map(|_| TemporalVars {
                c1_kernel: next(),
                c1_bias: next(),
                mix_weight: next(),
                mix_bias: next(),
                c2_kernel: next(),
                c2_bias: next(),
            })
            .collect();
        let (norm_t, head_t) = if config.use_temporal {
            (Some((next(), next())), Some((next(), next())))
        } else {
            (None, None)
        };
        let (norm_s, head_s) = if config.use_spatial {
            (Some((next(), next())), Some((next(), next())))
        } else {
            (None, None)
        };
        let head_st = (config.use_spatial && config.use_temporal).then(|| (next(), next()));
        Ok(Self { all: vars, queries, temporal, norm_t, head_t, norm_s, head_s, head_st })
    }
}

/// Per-clip logits as graph nodes; disabled branches are `None`.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub logit_t: Option<Var>,
    pub logit_s: Option<Var>,
    pub logit_st: Option<Var>,
}

impl ForwardVars {
    fn enabled(&self) -> impl Iterator<Item = Var> {
        [self.logit_t, self.logit_s, self.logit_st].into_iter().flatten()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorOutput {
    pub logit_t: Option<f64>,
    pub logit_s: Option<f64>,
    pub logit_st: Option<f64>,
    pub score: f64,
}

/// Mean (or sum) of equal-length layer embeddings.
pub fn aggregate<T: Scalar>(g: &mut Graph<T>, items: &[Var], mode: Aggregation) -> Result<Var> {
    let Some(&first) = items.first() else {
        return Err(Error::dim("aggregate", "no layer embeddings"));
    };
    let len = g.shape(first).to_vec();
    if let Some(bad) = items.iter().find(|&&v| g.shape(v) != len.as_slice()) {
        return Err(Error::dim(
            "aggregate",
            format!("layer embeddings differ in shape: {:?} vs {:?}", len, g.shape(*bad)),
        ));
    }
    let mut acc = first;
    for &v in &items[1..] {
        acc = g.add(acc, v)?;
    }
    match mode {
        Aggregation::Sum => Ok(acc),
        Aggregation::Mean => g.scale(acc, 1.0 / items.len() as f64),
    }
}

fn head<T: Scalar>(g: &mut Graph<T>, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let n = g.shape(x).iter().product::<usize>();
    let row = g.reshape(x, &[1, n])?;
    let wt = g.transpose(w)?;
    let y = g.matmul(row, wt)?;
    let y = g.add(y, b)?; // 1 × 1
    g.reshape(y, &[])
}

fn norm<T: Scalar>(g: &mut Graph<T>, x: Var, (gain, bias): (Var, Var), eps: f64) -> Result<Var> {
    g.layer_norm(x, gain, bias, eps)
}

/// Binds one clip's taps and runs both modules and the heads.
pub fn detector_forward<T: Scalar>(
    g: &mut Graph<T>,
    config: &DetectorConfig,
    vars: &DetectorVars,
    clip: &[LayerAttributes],
) -> Result<ForwardVars> {
    if clip.len() != config.layers {
        return Err(Error::dim(
            "detector_forward",
            format!("expected taps for {} layers, got {}", config.layers, clip.len()),
        ));
    }
    let needed = config.needed_attributes();
    let taps: Vec<LayerTapVars> = clip.iter().map(|la| bind_taps(g, la, &needed)).collect();
    forward_taps(g, config, vars, &taps)
}

/// As [`detector_forward`], for taps already in the graph.
pub fn forward_taps<T: Scalar>(
    g: &mut Graph<T>,
    config: &DetectorConfig,
    vars: &DetectorVars,
    taps: &[LayerTapVars],
) -> Result<ForwardVars> {
    config.validate()?;
    for tv in taps {
        if tv.patch_count != config.patch_count || tv.width() != config.width() || tv.frames != config.frames {
            return Err(Error::dim(
                "detector_forward",
                format!(
                    "taps are T={} P={} C={}, detector expects T={} P={} C={}",
                    tv.frames,
                    tv.patch_count,
                    tv.width(),
                    config.frames,
                    config.patch_count,
                    config.width()
                ),
            ));
        }
    }
    let e_t = if config.use_temporal {
        let mut per_layer = Vec::with_capacity(taps.len());
        for (l, tv) in taps.iter().enumerate() {
            let tvars = &vars.temporal[if config.share_temporal_weights { 0 } else { l }];
            per_layer.push(temporal_forward(g, tv, &config.temporal_gammas, tvars)?);
        }
        let agg = aggregate(g, &per_layer, config.aggregation)?;
        Some(norm(g, agg, vars.norm_t.expect("temporal enabled"), config.ln_eps)?)
    } else {
        None
    };
    let e_s = if config.use_spatial {
        let mut per_layer = Vec::with_capacity(taps.len());
        for (tv, &q) in taps.iter().zip(&vars.queries) {
            per_layer.push(spatial_forward(g, q, tv, config.spatial_gamma)?);
        }
        let agg = aggregate(g, &per_layer, config.aggregation)?;
        Some(norm(g, agg, vars.norm_s.expect("spatial enabled"), config.ln_eps)?)
    } else {
        None
    };
    let logit_t = match e_t {
        Some(e) => Some(head(g, e, vars.head_t.expect("temporal enabled"))?),
        None => None,
    };
    let logit_s = match e_s {
        Some(e) => Some(head(g, e, vars.head_s.expect("spatial enabled"))?),
        None => None,
    };
    let logit_st = match (e_t, e_s) {
        (Some(t), Some(s)) => {
            let cat = g.concat(&[t, s], 0)?;
            Some(head(g, cat, vars.head_st.expect("both enabled"))?)
        }
        _ => None,
    };
    Ok(ForwardVars { logit_t, logit_s, logit_st })
}

/// Reads logit values out of the graph and averages their sigmoids.
pub fn output_of<T: Scalar>(g: &Graph<T>, fwd: &ForwardVars) -> DetectorOutput {
    let val = |v: Option<Var>| v.map(|v| g.value(v).data()[0].to_f64_lossy());
    let (t, s, st) = (val(fwd.logit_t), val(fwd.logit_s), val(fwd.logit_st));
    let logits: Vec<f64> = [t, s, st].into_iter().flatten().collect();
    let score = logits.iter().map(|&z| crate::kernels::sigmoid(z)).sum::<f64>() / logits.len() as f64;
    DetectorOutput { logit_t: t, logit_s: s, logit_st: st, score }
}

/// Scores one clip (inference only, working precision).
pub fn score_clip(config: &DetectorConfig, params: &DetectorParams, clip: &[LayerAttributes]) -> Result<DetectorOutput> {
    let mut g = Graph::<f32>::new();
    let vars = params.bind(&mut g, config)?;
    let fwd = detector_forward(&mut g, config, &vars, clip)?;
    Ok(output_of(&g, &fwd))
}

/// Binary focal loss `−(1−p_t)^γ·ln p_t` via log-sigmoid identities.
pub fn focal_loss<T: Scalar>(g: &mut Graph<T>, logit: Var, label: bool, gamma: f64) -> Result<Var> {
    let z = if label { logit } else { g.neg(logit)? };
    let log_pt = g.log_sigmoid(z)?;
    let log_pt = g.reshape(log_pt, &[])?;
    let nz = g.neg(z)?;
    let log_one_minus = g.log_sigmoid(nz)?;
    let scaled = g.scale(log_one_minus, gamma)?;
    let modulator = g.exp(scaled)?;
    let prod = g.mul(modulator, log_pt)?;
    g.neg(prod)
}

/// Scalar form of [`focal_loss`], evaluated in `f64`.
pub fn focal_loss_value(logit: f64, label: bool, gamma: f64) -> f64 {
    let z = if label { logit } else { -logit };
    let log_pt = crate::kernels::log_sigmoid(z);
    -(gamma * crate::kernels::log_sigmoid(-z)).exp() * log_pt
}

/// Sum of the focal losses of the enabled heads for one clip.
pub fn clip_loss<T: Scalar>(g: &mut Graph<T>, fwd: &ForwardVars, label: bool, gamma: f64) -> Result<Var> {
    let mut terms = fwd.enabled().collect::<Vec<_>>().into_iter();
    let first = terms.next().ok_or_else(|| Error::Config("no enabled heads".into()))?;
    let mut acc = focal_loss(g, first, label, gamma)?;
    for v in terms {
        let l = focal_loss(g, v, label, gamma)?;
        acc = g.add(acc, l)?;
    }
    Ok(acc)
}

/// FCG term for the current queries, or `None` when it does not apply.
pub fn fcg_term<T: Scalar>(
    g: &mut Graph<T>,
    config: &DetectorConfig,
    vars: &DetectorVars,
    phi: Option<&FacialPartAttributes>,
) -> Result<Option<Var>> {
    if !(config.use_spatial && config.use_fcg) {
        return Ok(None);
    }
    let phi = phi.ok_or_else(|| Error::Config("FCG is enabled but no mined part attributes were supplied".into()))?;
    let rows: Vec<Tensor<T>> = phi.phi.iter().map(|t| t.cast::<T>()).collect();
    Ok(Some(fcg_loss(g, &vars.queries, &rows, config.tau, config.fcg_sign)?))
}

/// `mean_clips(L_T + L_S + L_ST) + w·L_FCG` over a batch in one graph.
pub fn batch_loss<T: Scalar>(
    g: &mut Graph<T>,
    config: &DetectorConfig,
    vars: &DetectorVars,
    clips: &[(&[LayerAttributes], bool)],
    phi: Option<&FacialPartAttributes>,
) -> Result<Var> {
    if clips.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut total: Option<Var> = None;
    for &(taps, label) in clips {
        let fwd = detector_forward(g, config, vars, taps)?;
        let l = clip_loss(g, &fwd, label, config.focal_gamma)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    let mean = g.scale(total.expect("non-empty"), 1.0 / clips.len() as f64)?;
    match fcg_term(g, config, vars, phi)? {
        Some(f) => total_loss(g, mean, Some(f), config.fcg_weight),
        None => Ok(mean),
    }
}

/// `focal + w·fcg`.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, focal: Var, fcg: Option<Var>, w: f64) -> Result<Var> {
    match fcg {
        Some(f) => {
            let wf = g.scale(f, w)?;
            g.add(focal, wf)
        }
        None => Ok(focal),
    }
}

/// Model, optimizer state and training bookkeeping in one archive.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: DetectorConfig,
    pub params: DetectorParams,
    pub optimizer: Option<AdamW<f32>>,
    /// Best-so-far parameters, kept alongside the latest ones for resuming.
    pub best_params: Option<DetectorParams>,
    /// Free-form string metadata (seed, epoch, history, …).
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut ar = TensorArchive::new();
        self.params.write_archive(&mut ar, "param/");
        if let Some(best) = &self.best_params {
            best.write_archive(&mut ar, "best/param/");
        }
        let config_json = serde_json::to_string(&self.config).map_err(|e| Error::Archive(e.to_string()))?;
        ar.set_meta("config_hash", format!("{:016x}", crate::archive::fnv1a64(config_json.as_bytes())));
        ar.set_meta("config", config_json);
        if let Some(opt) = &self.optimizer {
            let (m, v) = opt.moments();
            for ((name, m), v) in self.params.names().iter().zip(m).zip(v) {
                ar.insert(format!("optim/m/{name}"), m.clone());
                ar.insert(format!("optim/v/{name}"), v.clone());
            }
            ar.set_meta("optim/step", opt.step_count().to_string());
            ar.set_meta(
                "optim/config",
                serde_json::to_string(&opt.config).map_err(|e| Error::Archive(e.to_string()))?,
            );
        }
        for (k, v) in &self.meta {
            ar.set_meta(k.clone(), v.clone());
        }
        Ok(ar)
    }

    pub fn from_archive(ar: &TensorArchive) -> Result<Self> {
        let config_json = ar.meta("config").ok_or_else(|| Error::Load("checkpoint lacks `config` metadata".into()))?;
        let config: DetectorConfig =
            serde_json::from_str(config_json).map_err(|e| Error::Load(format!("checkpoint config: {e}")))?;
        let params = DetectorParams::read_archive(&config, ar, "param/")?;
        let best_params = match ar.get(&format!("best/param/{}", params.names()[0])) {
            Some(_) => Some(DetectorParams::read_archive(&config, ar, "best/param/")?),
            None => None,
        };
        let optimizer = match ar.meta("optim/step") {
            None => None,
            Some(step) => {
                let step = step.parse().map_err(|_| Error::Load("malformed `optim/step`".into()))?;
                let oc: AdamWConfig = serde_json::from_str(ar.meta("optim/config").unwrap_or("null"))
                    .map_err(|e| Error::Load(format!("optimizer config: {e}")))?;
                let mut m = Vec::new();
                let mut v = Vec::new();
                for (name, t) in params.names().iter().zip(params.tensors()) {
                    m.push(ar.require_shape(&format!("optim/m/{name}"), t.shape())?.clone());
                    v.push(ar.require_shape(&format!("optim/v/{name}"), t.shape())?.clone());
                }
                Some(AdamW::from_parts(oc, step, m, v)?)
            }
        };
        let meta = ar
            .metadata()
            .iter()
            .filter(|(k, _)| !matches!(k.as_str(), "config" | "config_hash" | "optim/step" | "optim/config"))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Ok(Self { config, params, optimizer, best_params, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&TensorArchive::load(path)?)
    }
}
