//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the objective forward in `f64`, so it
//! shares no code with the backward rules it is checking. It uses the
//! fourth-order central stencil
//! `(f(x−2h) − 8f(x−h) + 8f(x+h) − f(x+2h)) / 12h`, whose O(h⁴) truncation
//! error leaves room for a larger step and therefore less cancellation.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// A scalar objective that can be built at either precision.
pub trait Objective {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, params: &[Var]) -> Result<Var>;
}

/// Builds an [`Objective`] from a closure-like body that is generic over the
/// element type. Captured values are listed with their types and are
/// available by reference inside the body.
///
/// ```
/// use sidecue::{objective, gradcheck};
/// use sidecue::tensor::Tensor;
///
/// let scale = 3.0;
/// let obj = objective!((scale: f64) |g, p| {
///     let sq = g.mul(p[0], p[0])?;
///     let s = g.sum_all(sq)?;
///     g.scale(s, *scale)
/// });
/// let x = Tensor::from_f64([2], &[1.0, -2.0]).unwrap();
/// let report = gradcheck::check_f64(&obj, &[x], &Default::default()).unwrap();
/// assert!(report.max_rel_err < 1e-6);
/// ```
#[macro_export]
macro_rules! objective {
    (($($cap:ident : $ty:ty),* $(,)?) |$g:ident, $p:ident| $body:expr) => {{
        struct Obj { $($cap: $ty),* }
        impl $crate::gradcheck::Objective for Obj {
            #[allow(unused_variables)]
            fn eval<T: $crate::tensor::Scalar>(
                &self,
                $g: &mut $crate::autodiff::Graph<T>,
                $p: &[$crate::autodiff::Var],
            ) -> $crate::error::Result<$crate::autodiff::Var> {
                let Obj { $($cap),* } = self;
                $body
            }
        }
        Obj { $($cap),* }
    }};
    (|$g:ident, $p:ident| $body:expr) => {
        $crate::objective!(() |$g, $p| $body)
    };
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Stencil step `h`.
    pub step: f64,
    /// Check at most this many entries per parameter tensor (sampled).
    pub max_entries: Option<usize>,
    /// Lower bound on the relative-error denominator. Stencil roundoff is
    /// about `ε·|f| / h` (~1e-13 at the default step), so exact-zero
    /// gradients need a floor well above that.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            max_entries: None,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (parameter index, flat entry, analytic, numeric) at the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

fn evaluate(obj: &impl Objective, params: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let loss = obj.eval(&mut g, &vars)?;
    g.value(loss).item()
}

fn analytic<T: Scalar>(obj: &impl Objective, params: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
    let mut g = Graph::<T>::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.cast::<T>())).collect();
    let loss = obj.eval(&mut g, &vars)?;
    let mut grads = g.backward(loss)?;
    Ok(vars
        .iter()
        .map(|&v| grads.take(v).expect("param gradient").cast::<f64>())
        .collect())
}

/// Compares analytic gradients computed at precision `T` against `f64`
/// central differences.
pub fn check<T: Scalar>(obj: &impl Objective, params: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let grads = analytic::<T>(obj, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    let mut work = params.to_vec();
    for (pi, grad) in grads.iter().enumerate() {
        let n = params[pi].len();
        let entries: Vec<usize> = match opts.max_entries {
            Some(m) if m < n => {
                let mut e = sample(&mut rng, n, m).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..n).collect(),
        };
        for e in entries {
            let orig = work[pi].data()[e];
            let h = opts.step;
            let mut at = |offset: f64| -> Result<f64> {
                work[pi].data_mut()[e] = orig + offset;
                evaluate(obj, &work)
            };
            let (m2, m1, p1, p2) = (at(-2.0 * h)?, at(-h)?, at(h)?, at(2.0 * h)?);
            work[pi].data_mut()[e] = orig;
            let numeric = (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * h);
            let a = grad.data()[e];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((pi, e, a, numeric));
            }
        }
    }
    Ok(report)
}

/// 64-bit analytic vs 64-bit numeric.
pub fn check_f64(obj: &impl Objective, params: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport> {
    check::<f64>(obj, params, opts)
}

/// 32-bit analytic vs 64-bit numeric.
pub fn check_f32(obj: &impl Objective, params: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport> {
    check::<f32>(obj, params, opts)
}
