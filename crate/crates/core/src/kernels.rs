//! Slice-level numeric kernels shared by the frozen encoder and the autodiff
//! graph. Everything here is single-threaded and deterministic.

use crate::tensor::Scalar;

/// `out[m×n] += a[m×k] · b[k×n]`.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
pub fn matmul_bt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`.
pub fn matmul_at_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// Affine map of row vectors: `out[rows×out_dim] = x · wᵀ + bias`, with `w`
/// stored as `[out_dim, in_dim]`.
pub fn linear<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, rows: usize, in_dim: usize, out_dim: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * out_dim];
    matmul_bt_acc(x, w, &mut out, rows, in_dim, out_dim);
    if let Some(b) = bias {
        for row in out.chunks_mut(out_dim) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o = *o + bv;
            }
        }
    }
    out
}

/// Splits a shape at `axis` into (outer, extent, inner) block sizes.
pub fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along an axis described by `axis_blocks`.
pub fn softmax<T: Scalar>(x: &[T], out: &mut [T], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(x[at(j)]);
            }
            let mut total = T::zero();
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                total = total + e;
            }
            for j in 0..len {
                out[at(j)] = out[at(j)] / total;
            }
        }
    }
}

/// Layer normalization over contiguous rows of width `dim`.
/// Returns per-row (mean, 1/sqrt(var + eps)) for the backward pass.
pub fn layer_norm<T: Scalar>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    eps: T,
    dim: usize,
    out: &mut [T],
) -> Vec<(T, T)> {
    let n = T::from_usize(dim).unwrap();
    x.chunks(dim)
        .zip(out.chunks_mut(dim))
        .map(|(row, orow)| {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rstd = T::one() / (var + eps).sqrt();
            for (j, o) in orow.iter_mut().enumerate() {
                *o = (row[j] - mean) * rstd * gain[j] + bias[j];
            }
            (mean, rstd)
        })
        .collect()
}

/// Exact (erf-based) GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let xf = x.to_f64_lossy();
    T::lit(0.5 * xf * (1.0 + libm::erf(xf / std::f64::consts::SQRT_2)))
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let xf = x.to_f64_lossy();
    let cdf = 0.5 * (1.0 + libm::erf(xf / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * xf * xf).exp() / (2.0 * std::f64::consts::PI).sqrt();
    T::lit(cdf + xf * pdf)
}

/// `x · sigmoid(1.702 x)`, the GELU approximation used by CLIP encoders.
pub fn quick_gelu<T: Scalar>(x: T) -> T {
    x * sigmoid(T::lit(1.702) * x)
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(sigmoid(x))` without overflow for large |x|.
pub fn log_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Geometry of a batched 2D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub padding: usize,
    pub stride: usize,
}

impl ConvGeometry {
    /// Output extent along one axis, or `None` when the configuration does
    /// not tile the input exactly.
    pub fn out_extent(extent: usize, kernel: usize, padding: usize, stride: usize) -> Option<usize> {
        let span = (extent + 2 * padding).checked_sub(kernel)?;
        if stride == 0 || span % stride != 0 {
            return None;
        }
        Some(span / stride + 1)
    }

    pub fn out_hw(&self) -> (usize, usize) {
        (
            Self::out_extent(self.height, self.kernel, self.padding, self.stride).unwrap(),
            Self::out_extent(self.width, self.kernel, self.padding, self.stride).unwrap(),
        )
    }

    /// Calls `f(input_offset, kernel_offset, output_offset)` for every
    /// multiply-accumulate that lands inside the (zero-padded) input.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = self.out_hw();
        let k = self.kernel;
        for b in 0..self.batch {
            for co in 0..self.out_channels {
                for ci in 0..self.in_channels {
                    let x_base = (b * self.in_channels + ci) * self.height * self.width;
                    let k_base = (co * self.in_channels + ci) * k * k;
                    let o_base = (b * self.out_channels + co) * oh * ow;
                    for oy in 0..oh {
                        for ky in 0..k {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= self.height as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                for kx in 0..k {
                                    let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                    if ix < 0 || ix >= self.width as isize {
                                        continue;
                                    }
                                    f(
                                        x_base + iy as usize * self.width + ix as usize,
                                        k_base + ky * k + kx,
                                        o_base + oy * ow + ox,
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation (no kernel flip) with zero padding and per-output-channel bias.
pub fn conv2d<T: Scalar>(x: &[T], kernel: &[T], bias: Option<&[T]>, g: &ConvGeometry) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let mut out = vec![T::zero(); g.batch * g.out_channels * oh * ow];
    if let Some(bias) = bias {
        for (i, chunk) in out.chunks_mut(oh * ow).enumerate() {
            let b = bias[i % g.out_channels];
            chunk.iter_mut().for_each(|o| *o = b);
        }
    }
    g.for_each_tap(|xi, ki, oi| out[oi] = out[oi] + x[xi] * kernel[ki]);
    out
}

/// Gradients of `conv2d` w.r.t. input, kernel and bias given the upstream gradient.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    dout: &[T],
    g: &ConvGeometry,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (oh, ow) = g.out_hw();
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); kernel.len()];
    let mut db = vec![T::zero(); g.out_channels];
    g.for_each_tap(|xi, ki, oi| {
        dx[xi] = dx[xi] + dout[oi] * kernel[ki];
        dk[ki] = dk[ki] + dout[oi] * x[xi];
    });
    for (i, chunk) in dout.chunks(oh * ow).enumerate() {
        let c = i % g.out_channels;
        db[c] = db[c] + chunk.iter().copied().sum::<T>();
    }
    (dx, dk, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_is_stable_for_large_inputs() {
        let x = [1000.0f32, 0.0];
        let mut out = [0.0f32; 2];
        softmax(&x, &mut out, 1, 2, 1);
        assert_eq!(out, [1.0, 0.0]);
    }

    #[test]
    fn log_sigmoid_matches_direct_form_in_safe_range() {
        for &x in &[-5.0f64, -0.3, 0.0, 0.7, 4.0] {
            let direct = (1.0 / (1.0 + (-x).exp())).ln();
            assert!((log_sigmoid(x) - direct).abs() < 1e-14);
        }
        assert!(log_sigmoid(-1000.0f32).is_finite());
        assert_eq!(log_sigmoid(1000.0f32), 0.0);
    }

    #[test]
    fn conv_output_extent() {
        assert_eq!(ConvGeometry::out_extent(10, 5, 2, 1), Some(10));
        assert_eq!(ConvGeometry::out_extent(4, 3, 0, 2), None);
        assert_eq!(ConvGeometry::out_extent(2, 5, 0, 1), None);
    }
}
