use super::{broadcast_map, broadcast_shapes, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{check_perm, numel, permute_into, Scalar, Tensor};

/// Batch pairing for a broadcast batched matmul.
pub(super) struct MatMulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
    /// (a batch index, b batch index) for every output batch.
    pub batches: Vec<(usize, usize)>,
}

impl MatMulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::dim(
                "matmul",
                format!("operands must be at least rank 2, got {:?} and {:?}", a, b),
            ));
        }
        let (ab, am) = a.split_at(a.len() - 2);
        let (bb, bm) = b.split_at(b.len() - 2);
        if am[1] != bm[0] {
            return Err(Error::dim(
                "matmul",
                format!("inner dimensions differ: {:?} x {:?}", a, b),
            ));
        }
        let batch = broadcast_shapes("matmul", ab, bb)?;
        let amap = broadcast_map(ab, &batch);
        let bmap = broadcast_map(bb, &batch);
        let mut out_shape = batch.clone();
        out_shape.extend_from_slice(&[am[0], bm[1]]);
        Ok(Self {
            m: am[0],
            k: am[1],
            n: bm[1],
            out_shape,
            batches: amap.into_iter().zip(bmap).collect(),
        })
    }
}

impl<T: Scalar> Graph<T> {
    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, Vec<usize>)> {
        let shape = broadcast_shapes(name, self.shape(a), self.shape(b))?;
        let ma = broadcast_map(self.shape(a), &shape);
        let mb = broadcast_map(self.shape(b), &shape);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data = ma.iter().zip(&mb).map(|(&i, &j)| f(av[i], bv[j])).collect();
        Ok((Tensor::new(shape.clone(), data)?, shape))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary("div", a, b, |x, y| x / y)?;
        self.push("div", t, Op::Div(a, b), &[a, b])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| -x);
        self.push("neg", t, Op::Neg(a), &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::lit(s);
        let t = self.value(a).map(|x| x * s);
        self.push("scale", t, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::lit(s);
        let t = self.value(a).map(|x| x + s);
        self.push("add_scalar", t, Op::AddScalar(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| x.exp());
        self.push("exp", t, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| x.ln());
        self.push("log", t, Op::Log(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(kernels::sigmoid);
        self.push("sigmoid", t, Op::Sigmoid(a), &[a])
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(kernels::log_sigmoid);
        self.push("log_sigmoid", t, Op::LogSigmoid(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(kernels::gelu);
        self.push("gelu", t, Op::Gelu(a), &[a])
    }

    /// Batched matrix product `[.., M, K] x [.., K, N]` with broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatMulPlan::new(self.shape(a), self.shape(b))?;
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); numel(&plan.out_shape)];
        for (ob, (ai, bi)) in plan.batches.iter().enumerate() {
            kernels::matmul_acc(
                &av[ai * m * k..(ai + 1) * m * k],
                &bv[bi * k * n..(bi + 1) * k * n],
                &mut out[ob * m * n..(ob + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let t = Tensor::new(plan.out_shape, out)?;
        self.push("matmul", t, Op::MatMul(a, b), &[a, b])
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = check_perm(self.shape(a), perm)?;
        let src = self.value(a);
        let mut data = vec![T::zero(); src.len()];
        permute_into(src.shape(), perm, src.data(), &mut data);
        let t = Tensor::new(shape, data)?;
        self.push("permute", t, Op::Permute(a, perm.to_vec()), &[a])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::dim("transpose", format!("rank {r} < 2")));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape.to_vec())?;
        self.push("reshape", t, Op::Reshape(a), &[a])
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(a).len() {
            return Err(Error::dim(
                op,
                format!("axis {axis} out of range for shape {:?}", self.shape(a)),
            ));
        }
        Ok(())
    }

    /// Sums out `axis` (the axis is removed).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum", a, axis)?;
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = kernels::axis_blocks(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + x[(o * len + j) * inner + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let t = Tensor::new(out_shape, out)?;
        self.push("sum", t, Op::SumAxis(a, axis), &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean", a, axis)?;
        let len = self.shape(a)[axis];
        if len == 0 {
            return Err(Error::dim("mean", "mean over an empty axis"));
        }
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / len as f64)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let flat = self.reshape(a, &[n])?;
        self.sum_axis(flat, 0)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::dim("mean", "mean of an empty tensor"));
        }
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let src = self.value(a);
        let (outer, len, inner) = kernels::axis_blocks(src.shape(), axis);
        let mut out = vec![T::zero(); src.len()];
        kernels::softmax(src.data(), &mut out, outer, len, inner);
        let t = Tensor::new(src.shape().to_vec(), out)?;
        self.push("softmax", t, Op::Softmax(a, axis), &[a])
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", a, axis)?;
        let src = self.value(a);
        let (outer, len, inner) = kernels::axis_blocks(src.shape(), axis);
        let x = src.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
                let lse = max + (0..len).map(|j| (x[at(j)] - max).exp()).sum::<T>().ln();
                for j in 0..len {
                    out[at(j)] = x[at(j)] - lse;
                }
            }
        }
        let t = Tensor::new(src.shape().to_vec(), out)?;
        self.push("log_softmax", t, Op::LogSoftmax(a, axis), &[a])
    }

    /// Scales every slice along `axis` to unit L2 norm. Slices with norm
    /// below 1e-12 are a degenerate-vector error.
    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("l2_normalize", a, axis)?;
        let src = self.value(a);
        let (outer, len, inner) = kernels::axis_blocks(src.shape(), axis);
        let x = src.data();
        let mut out = vec![T::zero(); src.len()];
        let mut norms = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let norm = (0..len).map(|j| x[at(j)] * x[at(j)]).sum::<T>().sqrt();
                if norm.to_f64_lossy() < 1e-12 {
                    return Err(Error::Degenerate {
                        op: "l2_normalize",
                        norm: norm.to_f64_lossy(),
                    });
                }
                for j in 0..len {
                    out[at(j)] = x[at(j)] / norm;
                }
                norms.push(norm);
            }
        }
        let t = Tensor::new(src.shape().to_vec(), out)?;
        self.push("l2_normalize", t, Op::L2Normalize { x: a, axis, norms }, &[a])
    }

    /// Layer normalization over the last axis (population variance).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some(&dim) = shape.last() else {
            return Err(Error::dim("layer_norm", "rank-0 input"));
        };
        if dim == 0 {
            return Err(Error::dim("layer_norm", "zero-length normalization axis"));
        }
        if self.shape(gain) != [dim] || self.shape(bias) != [dim] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} must match last axis {dim}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let mut out = vec![T::zero(); numel(&shape)];
        let stats = kernels::layer_norm(
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
            T::lit(eps),
            dim,
            &mut out,
        );
        let t = Tensor::new(shape, out)?;
        self.push("layer_norm", t, Op::LayerNorm { x, gain, bias, stats }, &[x, gain, bias])
    }

    /// 2D cross-correlation. `x` is `[Cin, H, W]` or `[B, Cin, H, W]`,
    /// `kernel` is `[Cout, Cin, k, k]`, `bias` is `[Cout]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, padding: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        let (batched, batch, cin, h, w) = match xs.as_slice() {
            [c, h, w] => (false, 1, *c, *h, *w),
            [b, c, h, w] => (true, *b, *c, *h, *w),
            _ => return Err(Error::dim("conv2d", format!("input must be rank 3 or 4, got {:?}", xs))),
        };
        let [cout, kcin, kh, kw] = ks.as_slice() else {
            return Err(Error::dim("conv2d", format!("kernel must be rank 4, got {:?}", ks)));
        };
        if *kcin != cin {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {:?} expects {kcin} input channels, input {:?} has {cin}", ks, xs),
            ));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::Config(format!("conv2d kernel must be square and odd, got {kh}x{kw}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [*cout] {
                return Err(Error::dim(
                    "conv2d",
                    format!("bias {:?} must have {cout} entries", self.shape(b)),
                ));
            }
        }
        let (Some(oh), Some(ow)) = (
            ConvGeometry::out_extent(h, *kh, padding, stride),
            ConvGeometry::out_extent(w, *kh, padding, stride),
        ) else {
            return Err(Error::Config(format!(
                "conv2d output extent not integral for input {h}x{w}, kernel {kh}, padding {padding}, stride {stride}"
            )));
        };
        let geom = ConvGeometry {
            batch,
            in_channels: cin,
            out_channels: *cout,
            height: h,
            width: w,
            kernel: *kh,
            padding,
            stride,
        };
        let out = kernels::conv2d(
            self.value(x).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let shape = if batched { vec![batch, *cout, oh, ow] } else { vec![*cout, oh, ow] };
        let t = Tensor::new(shape, out)?;
        let mut parents = vec![x, kernel];
        parents.extend(bias);
        self.push("conv2d", t, Op::Conv2d { x, kernel, bias, geom }, &parents)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(Error::dim("concat", "no inputs"));
        };
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim(
                    "concat",
                    format!("shape {:?} incompatible with {:?} along axis {axis}", s, base),
                ));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = kernels::axis_blocks(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                data.extend_from_slice(&self.value(v).data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let t = Tensor::new(shape, data)?;
        self.push("concat", t, Op::Concat(inputs.to_vec(), axis), inputs)
    }

    /// Picks flat elements of `a` by index into a tensor of `shape`.
    pub fn gather(&mut self, a: Var, indices: &[usize], shape: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        if numel(shape) != indices.len() {
            return Err(Error::dim("gather", format!("{} indices for shape {:?}", indices.len(), shape)));
        }
        let mut data = Vec::with_capacity(indices.len());
        for &i in indices {
            let Some(&v) = src.get(i) else {
                return Err(Error::dim("gather", format!("index {i} out of range for {} elements", src.len())));
            };
            data.push(v);
        }
        let t = Tensor::new(shape.to_vec(), data)?;
        self.push("gather", t, Op::Gather(a, indices.to_vec()), &[a])
    }

    /// `softmax(q·kᵀ/√D)·v` over the last two axes with broadcast batches.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (qs, ks, vs) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        let (Some(&dq), Some(&dk)) = (qs.last(), ks.last()) else {
            return Err(Error::dim("attention", "rank-0 operand"));
        };
        if dq != dk {
            return Err(Error::dim(
                "attention",
                format!("query head dim {dq} differs from key head dim {dk} ({:?} vs {:?})", qs, ks),
            ));
        }
        if ks.len() < 2 || vs.len() < 2 || ks[ks.len() - 2] != vs[vs.len() - 2] {
            return Err(Error::dim(
                "attention",
                format!("keys {:?} and values {:?} disagree on sequence length", ks, vs),
            ));
        }
        let weights = self.attention_weights(q, k)?;
        self.matmul(weights, v)
    }

    /// Row-normalized attention map `softmax(q·kᵀ/√D)`.
    pub fn attention_weights(&mut self, q: Var, k: Var) -> Result<Var> {
        let d = *self.shape(q).last().unwrap_or(&0);
        if d == 0 || self.shape(k).last() != Some(&d) {
            return Err(Error::dim(
                "attention",
                format!("head dims differ: {:?} vs {:?}", self.shape(q), self.shape(k)),
            ));
        }
        let kt = self.transpose(k)?;
        let logits = self.matmul(q, kt)?;
        let scaled = self.scale(logits, 1.0 / (d as f64).sqrt())?;
        let last = self.shape(scaled).len() - 1;
        self.softmax(scaled, last)
    }

    /// Cosine similarity of two vectors, as a rank-0 tensor.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).len() != 1 || self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                "cosine_similarity",
                format!("expected equal-length vectors, got {:?} and {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let an = self.l2_normalize(a, 0)?;
        let bn = self.l2_normalize(b, 0)?;
        let prod = self.mul(an, bn)?;
        self.sum_all(prod)
    }

    /// Contiguous range `[start, start + len)` of `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("narrow", a, axis)?;
        let shape = self.shape(a).to_vec();
        if start + len > shape[axis] {
            return Err(Error::dim(
                "narrow",
                format!("range {start}..{} exceeds extent {}", start + len, shape[axis]),
            ));
        }
        let (outer, extent, inner) = kernels::axis_blocks(&shape, axis);
        let mut idx = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for j in start..start + len {
                idx.extend((0..inner).map(|i| (o * extent + j) * inner + i));
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(a, &idx, &out_shape)
    }
}
