//! Shared fixtures for integration tests: gradient-check cases for every
//! differentiable graph operation and for the composed training objective.

#![allow(dead_code)]

use sidecue::autodiff::{Graph, Var};
use sidecue::detector::{aggregate, batch_loss, focal_loss, Aggregation, DetectorConfig, DetectorParams, DetectorVars};
use sidecue::encoder::{Attribute, EncoderConfig, EncoderWeights, LayerAttributes};
use sidecue::error::Result;
use sidecue::gradcheck::{check_f32, check_f64, GradCheckOptions, GradCheckReport, Objective};
use sidecue::objective;
use sidecue::pipeline::toyset::{generate, ToysetConfig};
use sidecue::spatial::{fcg_loss, spatial_forward, FacialPartAttributes, FcgSign};
use sidecue::taps::bind_taps;
use sidecue::temporal::{temporal_forward, temporal_param_shapes, TemporalVars};
use sidecue::tensor::{Scalar, Tensor};

pub const F64_TOL: f64 = 1e-6;
pub const F32_TOL: f64 = 1e-3;

/// Deterministic, non-symmetric test values in roughly `[-1, 1]`.
pub fn values(shape: &[usize], salt: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| ((i as f64 + 1.0) * 0.7548776662 + salt).sin() * 0.9).collect::<Vec<_>>();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn positive(shape: &[usize], salt: f64) -> Tensor<f64> {
    let v = values(shape, salt);
    v.map(|x| 0.5 + x.abs())
}

/// `Σ out ⊙ W` with a fixed weight tensor, so every output entry matters.
pub fn probe<T: Scalar>(g: &mut Graph<T>, out: Var) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let w = g.constant(values(&shape, 0.123).cast::<T>());
    let prod = g.mul(out, w)?;
    g.sum_all(prod)
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: String,
    pub f64_report: GradCheckReport,
    pub f32_report: GradCheckReport,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.f64_report.max_rel_err < F64_TOL && self.f32_report.max_rel_err < F32_TOL
    }
}

pub fn f32_options() -> GradCheckOptions {
    // 32-bit analytic gradients carry ~1e-7 absolute noise per accumulated
    // term; entries below this magnitude are compared absolutely.
    GradCheckOptions { floor: 1e-3, ..Default::default() }
}

pub fn run_case(name: &str, obj: &impl Objective, params: &[Tensor<f64>], opts: &GradCheckOptions) -> CaseResult {
    let f64_report = check_f64(obj, params, opts).unwrap_or_else(|e| panic!("{name}: {e}"));
    let f32_opts = GradCheckOptions { floor: opts.floor.max(f32_options().floor), ..opts.clone() };
    let f32_report = check_f32(obj, params, &f32_opts).unwrap_or_else(|e| panic!("{name}: {e}"));
    CaseResult { name: name.to_string(), f64_report, f32_report }
}

/// One case per differentiable graph operation (including broadcasting and
/// batched variants).
pub fn op_cases() -> Vec<CaseResult> {
    let o = GradCheckOptions::default();
    let mut out = Vec::new();
    let mut case = |_name: &str, run: &dyn Fn() -> CaseResult| out.push(run());
    case("add", &|| {
        run_case("add", &objective!(|g, p| { let y = g.add(p[0], p[1])?; probe(g, y) }), &[values(&[2, 3], 0.1), values(&[2, 3], 0.2)], &o)
    });
    case("add (broadcast)", &|| {
        run_case(
            "add (broadcast)",
            &objective!(|g, p| { let y = g.add(p[0], p[1])?; probe(g, y) }),
            &[values(&[2, 3, 4], 0.1), values(&[3, 1], 0.2)],
            &o,
        )
    });
    case("sub", &|| {
        run_case("sub", &objective!(|g, p| { let y = g.sub(p[0], p[1])?; probe(g, y) }), &[values(&[4, 1], 0.3), values(&[1, 5], 0.4)], &o)
    });
    case("mul", &|| {
        run_case("mul", &objective!(|g, p| { let y = g.mul(p[0], p[1])?; probe(g, y) }), &[values(&[2, 3], 0.5), values(&[3], 0.6)], &o)
    });
    case("div", &|| {
        run_case("div", &objective!(|g, p| { let y = g.div(p[0], p[1])?; probe(g, y) }), &[values(&[2, 3], 0.7), positive(&[2, 1], 0.8)], &o)
    });
    case("neg", &|| run_case("neg", &objective!(|g, p| { let y = g.neg(p[0])?; probe(g, y) }), &[values(&[5], 0.9)], &o));
    case("scale", &|| run_case("scale", &objective!(|g, p| { let y = g.scale(p[0], -1.7)?; probe(g, y) }), &[values(&[5], 1.0)], &o));
    case("add_scalar", &|| {
        run_case("add_scalar", &objective!(|g, p| { let y = g.add_scalar(p[0], 0.3)?; let y = g.mul(y, y)?; probe(g, y) }), &[values(&[5], 1.1)], &o)
    });
    case("exp", &|| run_case("exp", &objective!(|g, p| { let y = g.exp(p[0])?; probe(g, y) }), &[values(&[6], 1.2)], &o));
    case("log", &|| run_case("log", &objective!(|g, p| { let y = g.log(p[0])?; probe(g, y) }), &[positive(&[6], 1.3)], &o));
    case("sigmoid", &|| run_case("sigmoid", &objective!(|g, p| { let y = g.sigmoid(p[0])?; probe(g, y) }), &[values(&[6], 1.4).map(|x| 4.0 * x)], &o));
    case("log_sigmoid", &|| {
        run_case("log_sigmoid", &objective!(|g, p| { let y = g.log_sigmoid(p[0])?; probe(g, y) }), &[values(&[6], 1.5).map(|x| 6.0 * x)], &o)
    });
    case("gelu", &|| run_case("gelu", &objective!(|g, p| { let y = g.gelu(p[0])?; probe(g, y) }), &[values(&[8], 1.6).map(|x| 3.0 * x)], &o));
    case("matmul", &|| {
        run_case("matmul", &objective!(|g, p| { let y = g.matmul(p[0], p[1])?; probe(g, y) }), &[values(&[3, 4], 1.7), values(&[4, 2], 1.8)], &o)
    });
    case("matmul (batched, broadcast)", &|| {
        run_case(
            "matmul (batched, broadcast)",
            &objective!(|g, p| { let y = g.matmul(p[0], p[1])?; probe(g, y) }),
            &[values(&[2, 1, 3, 4], 1.9), values(&[3, 4, 2], 2.0)],
            &o,
        )
    });
    case("permute", &|| {
        run_case("permute", &objective!(|g, p| { let y = g.permute(p[0], &[2, 0, 1])?; probe(g, y) }), &[values(&[2, 3, 4], 2.1)], &o)
    });
    case("transpose", &|| run_case("transpose", &objective!(|g, p| { let y = g.transpose(p[0])?; probe(g, y) }), &[values(&[2, 3, 4], 2.2)], &o));
    case("reshape", &|| run_case("reshape", &objective!(|g, p| { let y = g.reshape(p[0], &[4, 6])?; probe(g, y) }), &[values(&[2, 3, 4], 2.3)], &o));
    case("sum_axis", &|| run_case("sum_axis", &objective!(|g, p| { let y = g.sum_axis(p[0], 1)?; probe(g, y) }), &[values(&[2, 3, 4], 2.4)], &o));
    case("mean_axis", &|| run_case("mean_axis", &objective!(|g, p| { let y = g.mean_axis(p[0], 2)?; probe(g, y) }), &[values(&[2, 3, 4], 2.5)], &o));
    case("sum_all", &|| {
        run_case("sum_all", &objective!(|g, p| { let y = g.mul(p[0], p[0])?; g.sum_all(y) }), &[values(&[3, 3], 2.6)], &o)
    });
    case("mean_all", &|| {
        run_case("mean_all", &objective!(|g, p| { let y = g.exp(p[0])?; g.mean_all(y) }), &[values(&[3, 3], 2.7)], &o)
    });
    case("softmax", &|| run_case("softmax", &objective!(|g, p| { let y = g.softmax(p[0], 1)?; probe(g, y) }), &[values(&[2, 5, 3], 2.8).map(|x| 3.0 * x)], &o));
    case("log_softmax", &|| {
        run_case("log_softmax", &objective!(|g, p| { let y = g.log_softmax(p[0], 2)?; probe(g, y) }), &[values(&[2, 3, 5], 2.9).map(|x| 3.0 * x)], &o)
    });
    case("l2_normalize", &|| {
        run_case("l2_normalize", &objective!(|g, p| { let y = g.l2_normalize(p[0], 1)?; probe(g, y) }), &[values(&[3, 4], 3.0)], &o)
    });
    case("layer_norm", &|| {
        run_case(
            "layer_norm",
            &objective!(|g, p| { let y = g.layer_norm(p[0], p[1], p[2], 1e-5)?; probe(g, y) }),
            &[values(&[3, 6], 3.1).map(|x| 2.0 * x), values(&[6], 3.2), values(&[6], 3.3)],
            &o,
        )
    });
    case("conv2d", &|| {
        run_case(
            "conv2d",
            &objective!(|g, p| { let y = g.conv2d(p[0], p[1], Some(p[2]), 1, 1)?; probe(g, y) }),
            &[values(&[2, 5, 5], 3.4), values(&[3, 2, 3, 3], 3.5), values(&[3], 3.6)],
            &o,
        )
    });
    case("conv2d (batched, stride 2, no bias)", &|| {
        run_case(
            "conv2d (batched, stride 2, no bias)",
            &objective!(|g, p| { let y = g.conv2d(p[0], p[1], None, 2, 2)?; probe(g, y) }),
            &[values(&[2, 3, 7, 7], 3.7), values(&[2, 3, 5, 5], 3.8)],
            &o,
        )
    });
    case("concat", &|| {
        run_case(
            "concat",
            &objective!(|g, p| { let y = g.concat(&[p[0], p[1]], 1)?; probe(g, y) }),
            &[values(&[2, 3], 3.9), values(&[2, 4], 4.0)],
            &o,
        )
    });
    case("gather", &|| {
        run_case(
            "gather",
            &objective!(|g, p| { let y = g.gather(p[0], &[5, 0, 5, 2, 3], &[5])?; probe(g, y) }),
            &[values(&[2, 3], 4.1)],
            &o,
        )
    });
    case("narrow", &|| run_case("narrow", &objective!(|g, p| { let y = g.narrow(p[0], 1, 1, 2)?; probe(g, y) }), &[values(&[2, 4, 3], 4.2)], &o));
    case("attention_weights", &|| {
        run_case(
            "attention_weights",
            &objective!(|g, p| { let y = g.attention_weights(p[0], p[1])?; probe(g, y) }),
            &[values(&[2, 3, 4], 4.3), values(&[2, 5, 4], 4.4)],
            &o,
        )
    });
    case("attention", &|| {
        run_case(
            "attention",
            &objective!(|g, p| { let y = g.attention(p[0], p[1], p[2])?; probe(g, y) }),
            &[values(&[2, 3, 4], 4.5), values(&[2, 5, 4], 4.6), values(&[2, 5, 3], 4.7)],
            &o,
        )
    });
    case("cosine_similarity", &|| {
        run_case(
            "cosine_similarity",
            &objective!(|g, p| g.cosine_similarity(p[0], p[1])),
            &[values(&[6], 4.8), values(&[6], 4.9)],
            &o,
        )
    });
    out
}

fn tap_tensors(t: usize, p: usize, h: usize, d: usize, salt: f64) -> LayerAttributes {
    let a = |s: f64| values(&[t, p, h, d], salt + s).cast::<f32>();
    LayerAttributes { a_q: a(0.1), a_k: a(0.2), a_v: a(0.3), patches: values(&[t, p, h * d], salt + 0.4).cast() }
}

/// Decoder building blocks on small random taps.
pub fn module_cases() -> Vec<CaseResult> {
    let o = GradCheckOptions::default();
    let taps = tap_tensors(3, 4, 2, 3, 5.0);
    let mut out = Vec::new();
    let la = taps.clone();
    out.push(run_case(
        "spatial_forward",
        &objective!((la: LayerAttributes) |g, p| {
            let tv = bind_taps(g, la, &[Attribute::K]);
            let e = spatial_forward(g, p[0], &tv, Attribute::K)?;
            probe(g, e)
        }),
        &[values(&[2, 6], 5.5)],
        &o,
    ));
    let phi = vec![unit_rows(&[4, 5], 5.6)];
    out.push(run_case(
        "fcg_loss",
        &objective!((phi: Vec<Tensor<f64>>) |g, p| {
            let phi: Vec<Tensor<T>> = phi.iter().map(|t| t.cast()).collect();
            fcg_loss(g, &[p[0]], &phi, 10.0, FcgSign::NegativeLog)
        }),
        &[values(&[4, 5], 5.7)],
        &o,
    ));
    let shapes = temporal_param_shapes(3, 2, 3);
    let params: Vec<Tensor<f64>> = shapes.iter().enumerate().map(|(i, (_, s))| values(s, 6.0 + i as f64).map(|x| 0.5 * x)).collect();
    let la = taps;
    out.push(run_case(
        "temporal_forward",
        &objective!((la: LayerAttributes) |g, p| {
            let tv = bind_taps(g, la, &Attribute::ALL);
            let vars = TemporalVars { c1_kernel: p[0], c1_bias: p[1], mix_weight: p[2], mix_bias: p[3], c2_kernel: p[4], c2_bias: p[5] };
            let e = temporal_forward(g, &tv, &Attribute::ALL, &vars)?;
            probe(g, e)
        }),
        &params,
        &o,
    ));
    out.push(run_case(
        "focal_loss",
        &objective!(|g, p| {
            let z = g.reshape(p[0], &[])?;
            let a = focal_loss(g, z, true, 4.0)?;
            let b = focal_loss(g, z, false, 4.0)?;
            let b = g.scale(b, 0.7)?;
            g.add(a, b)
        }),
        &[Tensor::from_f64([1], &[0.37]).unwrap()],
        &o,
    ));
    out.push(run_case(
        "aggregate (mean, sum)",
        &objective!(|g, p| {
            let a = aggregate(g, &[p[0], p[1]], Aggregation::Mean)?;
            let b = aggregate(g, &[p[0], p[1]], Aggregation::Sum)?;
            let y = g.mul(a, b)?;
            probe(g, y)
        }),
        &[values(&[5], 6.5), values(&[5], 6.6)],
        &o,
    ));
    out
}

/// Rows scaled to unit length.
pub fn unit_rows(shape: &[usize], salt: f64) -> Tensor<f64> {
    let t = values(shape, salt);
    let c = *shape.last().unwrap();
    let data = t
        .data()
        .chunks(c)
        .flat_map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(move |x| x / n).collect::<Vec<_>>()
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Tiny-profile fixture for the composed objective.
#[derive(Clone)]
pub struct ComposedFixture {
    pub config: DetectorConfig,
    pub params: DetectorParams,
    pub clips: Vec<(Vec<LayerAttributes>, bool)>,
    pub phi: FacialPartAttributes,
}

pub fn composed_fixture(frames: usize) -> ComposedFixture {
    let enc_cfg = EncoderConfig::tiny();
    let enc = EncoderWeights::synthetic(&enc_cfg, 3).unwrap();
    let ts = generate(&ToysetConfig { train_videos: 2, val_videos: 0, test_videos: 0, frames, ..Default::default() }).unwrap();
    let clips = ts
        .train
        .iter()
        .map(|v| (enc.encode_clip(&enc.normalize(&v.frames).unwrap()).unwrap(), v.label))
        .collect();
    let phi = FacialPartAttributes {
        phi: (0..enc_cfg.layers).map(|l| unit_rows(&[4, enc_cfg.width()], 7.0 + l as f64).cast()).collect(),
        gamma: Attribute::K,
        seed: 0,
        rounds: 1,
    };
    let config = DetectorConfig::for_encoder(&enc_cfg, frames);
    let params = DetectorParams::init(&config, Some(&phi), 5).unwrap();
    ComposedFixture { config, params, clips, phi }
}

/// Full objective: focal losses of all three heads over a two-clip batch
/// plus the weighted FCG term, differentiated w.r.t. every parameter.
/// `max_entries` bounds the sampled entries per parameter tensor.
pub fn composed_case(fx: &ComposedFixture, max_entries: Option<usize>) -> CaseResult {
    let ComposedFixture { config, clips, phi, .. } = fx.clone();
    let obj = objective!((config: DetectorConfig, clips: Vec<(Vec<LayerAttributes>, bool)>, phi: FacialPartAttributes) |g, p| {
        let vars = DetectorVars::from_vars(config, p.to_vec())?;
        let batch: Vec<(&[LayerAttributes], bool)> = clips.iter().map(|(c, l)| (c.as_slice(), *l)).collect();
        batch_loss(g, config, &vars, &batch, Some(phi))
    });
    let params: Vec<Tensor<f64>> = fx.params.tensors().iter().map(|t| t.cast()).collect();
    let opts = GradCheckOptions { max_entries, ..Default::default() };
    run_case("composed loss (spatial + temporal + heads + FCG)", &obj, &params, &opts)
}
