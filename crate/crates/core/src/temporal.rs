//! Patch-based temporal branch.
//!
//! For every patch position the frame-to-frame self-attention maps of each
//! selected attribute are stacked into a `(|Γ|·H) × T × T` volume, squeezed
//! by a 5×5 convolution into one `T × T` affinity map per patch, mixed by a
//! residual linear layer, and finally a spatial 5×5 convolution over the
//! patch grid collapses the `T²` channels into one value per patch.

use crate::autodiff::{Graph, Var};
use crate::encoder::Attribute;
use crate::error::{Error, Result};
use crate::taps::LayerTapVars;
use crate::tensor::Scalar;

pub const TEMPORAL_KERNEL: usize = 5;

/// Trainable tensors of one temporal module (graph handles).
#[derive(Clone, Copy, Debug)]
pub struct TemporalVars {
    /// `1 × (|Γ|·H) × 5 × 5` and `[1]`.
    pub c1_kernel: Var,
    pub c1_bias: Var,
    /// `T² × T²` and `[T²]`.
    pub mix_weight: Var,
    pub mix_bias: Var,
    /// `1 × T² × 5 × 5` and `[1]`.
    pub c2_kernel: Var,
    pub c2_bias: Var,
}

/// Shapes of a temporal module's parameters, in [`TemporalVars`] field order.
pub fn temporal_param_shapes(gammas: usize, heads: usize, frames: usize) -> [(&'static str, Vec<usize>); 6] {
    let k = TEMPORAL_KERNEL;
    let tt = frames * frames;
    [
        ("c1/kernel", vec![1, gammas * heads, k, k]),
        ("c1/bias", vec![1]),
        ("mix/weight", vec![tt, tt]),
        ("mix/bias", vec![tt]),
        ("c2/kernel", vec![1, tt, k, k]),
        ("c2/bias", vec![1]),
    ]
}

/// Per-patch temporal self-attention maps `M1`: `P × (|Γ|·H) × T × T`,
/// concatenated attribute-major along the channel axis.
pub fn pt_mhsa<T: Scalar>(g: &mut Graph<T>, taps: &LayerTapVars, gammas: &[Attribute]) -> Result<Var> {
    if gammas.is_empty() {
        return Err(Error::Config("temporal module needs at least one attribute".into()));
    }
    let mut maps = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        let a = taps.attribute(gamma)?;
        let a = g.permute(a, &[1, 2, 0, 3])?; // P × H × T × D
        maps.push(g.attention_weights(a, a)?);
    }
    if maps.len() == 1 {
        Ok(maps[0])
    } else {
        g.concat(&maps, 1)
    }
}

/// Full temporal branch for one layer; returns `e^t_l` of length `P`.
pub fn temporal_forward<T: Scalar>(
    g: &mut Graph<T>,
    taps: &LayerTapVars,
    gammas: &[Attribute],
    vars: &TemporalVars,
) -> Result<Var> {
    let (p, t) = (taps.patch_count, taps.frames);
    let grid = (p as f64).sqrt().round() as usize;
    if grid * grid != p {
        return Err(Error::Config(format!("patch count {p} is not a square grid")));
    }
    let pad = TEMPORAL_KERNEL / 2;
    let m1 = pt_mhsa(g, taps, gammas)?;
    let m2 = g.conv2d(m1, vars.c1_kernel, Some(vars.c1_bias), pad, 1)?; // P × 1 × T × T
    let m2 = g.reshape(m2, &[p, t * t])?;
    let wt = g.transpose(vars.mix_weight)?;
    let mixed = g.matmul(m2, wt)?;
    let mixed = g.add(mixed, vars.mix_bias)?;
    let m3 = g.add(m2, mixed)?;
    let m3 = g.transpose(m3)?; // T² × P
    let m3 = g.reshape(m3, &[t * t, grid, grid])?;
    let out = g.conv2d(m3, vars.c2_kernel, Some(vars.c2_bias), pad, 1)?; // 1 × √P × √P
    g.reshape(out, &[p])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::LayerAttributes;
    use crate::taps::bind_taps;
    use crate::tensor::Tensor;

    fn attrs(t: usize, p: usize, h: usize, d: usize) -> LayerAttributes {
        let n = t * p * h * d;
        let a = |k: usize| Tensor::new(vec![t, p, h, d], (0..n).map(|i| (((i * k) % 17) as f32 - 8.0) * 0.1).collect()).unwrap();
        LayerAttributes { a_q: a(3), a_k: a(5), a_v: a(7), patches: Tensor::zeros(vec![t, p, h * d]) }
    }

    #[test]
    fn attention_maps_are_row_stochastic() {
        let la = attrs(3, 4, 2, 3);
        let mut g = Graph::<f64>::new();
        let tv = bind_taps(&mut g, &la, &Attribute::ALL);
        let m = pt_mhsa(&mut g, &tv, &Attribute::ALL).unwrap();
        assert_eq!(g.shape(m), &[4, 6, 3, 3]);
        for row in g.value(m).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_shape_and_constant_output_for_zero_kernels() {
        let la = attrs(3, 4, 2, 3);
        let mut g = Graph::<f64>::new();
        let tv = bind_taps(&mut g, &la, &Attribute::ALL);
        let shapes = temporal_param_shapes(3, 2, 3);
        let mut v: Vec<Var> = shapes.iter().map(|(_, s)| g.param(Tensor::zeros(s.clone()))).collect();
        v[5] = g.param(Tensor::from_f64([1], &[0.25]).unwrap());
        let vars = TemporalVars {
            c1_kernel: v[0],
            c1_bias: v[1],
            mix_weight: v[2],
            mix_bias: v[3],
            c2_kernel: v[4],
            c2_bias: v[5],
        };
        let e = temporal_forward(&mut g, &tv, &Attribute::ALL, &vars).unwrap();
        assert_eq!(g.value(e).data(), &[0.25; 4]);
    }

    #[test]
    fn rejects_non_square_patch_count() {
        let la = attrs(2, 3, 1, 2);
        let mut g = Graph::<f64>::new();
        let tv = bind_taps(&mut g, &la, &[Attribute::Q]);
        let shapes = temporal_param_shapes(1, 1, 2);
        let v: Vec<Var> = shapes.iter().map(|(_, s)| g.param(Tensor::zeros(s.clone()))).collect();
        let vars = TemporalVars {
            c1_kernel: v[0],
            c1_bias: v[1],
            mix_weight: v[2],
            mix_bias: v[3],
            c2_kernel: v[4],
            c2_bias: v[5],
        };
        assert!(matches!(temporal_forward(&mut g, &tv, &[Attribute::Q], &vars), Err(Error::Config(_))));
    }
}
