//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation appends one
//! node whose parents already exist, so append order is a topological order
//! and [`Graph::backward`] is a single reverse sweep.
//!
//! ```
//! use sidecue::autodiff::Graph;
//! use sidecue::tensor::Tensor;
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum_all(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

mod broadcast;
mod ops;

pub use broadcast::{broadcast_map, broadcast_shapes};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{invert_perm, permute_into, Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Gelu(Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    SumAxis(Var, usize),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    L2Normalize { x: Var, axis: usize, norms: Vec<T> },
    LayerNorm { x: Var, gain: Var, bias: Var, stats: Vec<(T, T)> },
    Conv2d { x: Var, kernel: Var, bias: Option<Var>, geom: ConvGeometry },
    Concat(Vec<Var>, usize),
    Gather(Var, Vec<usize>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only computation record.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable leaf; gradients never flow into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_val = &self.nodes[loss.0].value;
        if loss_val.len() != 1 {
            return Err(Error::NotScalar(loss_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_val.shape().to_vec(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if node.requires_grad && slot.is_none() {
                *slot = Some(Tensor::zeros(node.value.shape().to_vec()));
            } else if !node.requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape().to_vec()));
        f(slot.data_mut());
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                for (v, s) in [(*a, T::one()), (*b, sign)] {
                    let map = broadcast_map(self.shape(v), g.shape());
                    self.accumulate(grads, v, |d| {
                        for (i, &m) in map.iter().enumerate() {
                            d[m] = d[m] + s * gd[i];
                        }
                    });
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let shape = g.shape();
                let ma = broadcast_map(self.shape(*a), shape);
                let mb = broadcast_map(self.shape(*b), shape);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let div = matches!(node.op, Op::Div(..));
                self.accumulate(grads, *a, |d| {
                    for i in 0..gd.len() {
                        let term = if div { gd[i] / bv[mb[i]] } else { gd[i] * bv[mb[i]] };
                        d[ma[i]] = d[ma[i]] + term;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for i in 0..gd.len() {
                        let term = if div {
                            -gd[i] * av[ma[i]] / (bv[mb[i]] * bv[mb[i]])
                        } else {
                            gd[i] * av[ma[i]]
                        };
                        d[mb[i]] = d[mb[i]] + term;
                    }
                });
            }
            Op::Neg(a) => self.unary(grads, *a, gd, |_, _, g| -g),
            Op::Scale(a, s) => self.unary(grads, *a, gd, |_, _, g| g * *s),
            Op::AddScalar(a) => self.unary(grads, *a, gd, |_, _, g| g),
            Op::Exp(a) => self.unary(grads, *a, gd, |_, i, g| g * out[i]),
            Op::Log(a) => self.unary(grads, *a, gd, |x, _, g| g / x),
            Op::Sigmoid(a) => self.unary(grads, *a, gd, |_, i, g| g * out[i] * (T::one() - out[i])),
            Op::LogSigmoid(a) => self.unary(grads, *a, gd, |x, _, g| g * kernels::sigmoid(-x)),
            Op::Gelu(a) => self.unary(grads, *a, gd, |x, _, g| g * kernels::gelu_grad(x)),
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, g, grads)?,
            Op::Permute(a, perm) => {
                let inv = invert_perm(perm);
                self.accumulate(grads, *a, |d| {
                    let mut tmp = vec![T::zero(); d.len()];
                    permute_into(g.shape(), &inv, gd, &mut tmp);
                    for (x, t) in d.iter_mut().zip(tmp) {
                        *x = *x + t;
                    }
                });
            }
            Op::Reshape(a) => self.unary(grads, *a, gd, |_, _, g| g),
            Op::SumAxis(a, axis) => {
                let (outer, len, inner) = kernels::axis_blocks(self.shape(*a), *axis);
                self.accumulate(grads, *a, |d| {
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                let di = (o * len + j) * inner + i;
                                d[di] = d[di] + gd[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = kernels::axis_blocks(g.shape(), *axis);
                self.accumulate(grads, *a, |d| {
                    for_each_slice(outer, len, inner, |at| {
                        let dot: T = (0..len).map(|j| gd[at(j)] * out[at(j)]).sum();
                        for j in 0..len {
                            let k = at(j);
                            d[k] = d[k] + out[k] * (gd[k] - dot);
                        }
                    });
                });
            }
            Op::LogSoftmax(a, axis) => {
                let (outer, len, inner) = kernels::axis_blocks(g.shape(), *axis);
                self.accumulate(grads, *a, |d| {
                    for_each_slice(outer, len, inner, |at| {
                        let total: T = (0..len).map(|j| gd[at(j)]).sum();
                        for j in 0..len {
                            let k = at(j);
                            d[k] = d[k] + gd[k] - out[k].exp() * total;
                        }
                    });
                });
            }
            Op::L2Normalize { x, axis, norms } => {
                let (outer, len, inner) = kernels::axis_blocks(g.shape(), *axis);
                self.accumulate(grads, *x, |d| {
                    let mut slice = 0;
                    for_each_slice(outer, len, inner, |at| {
                        let n = norms[slice];
                        slice += 1;
                        let dot: T = (0..len).map(|j| gd[at(j)] * out[at(j)]).sum();
                        for j in 0..len {
                            let k = at(j);
                            d[k] = d[k] + (gd[k] - out[k] * dot) / n;
                        }
                    });
                });
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let dim = *g.shape().last().unwrap();
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let n = T::from_usize(dim).unwrap();
                let mut dgain = vec![T::zero(); dim];
                let mut dbias = vec![T::zero(); dim];
                let mut dx = vec![T::zero(); xv.len()];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let row = r * dim..(r + 1) * dim;
                    let xs = &xv[row.clone()];
                    let gs = &gd[row.clone()];
                    let mut mean_dy = T::zero();
                    let mut mean_dy_xhat = T::zero();
                    for j in 0..dim {
                        let xhat = (xs[j] - mean) * rstd;
                        let dy = gs[j] * gv[j];
                        dgain[j] = dgain[j] + gs[j] * xhat;
                        dbias[j] = dbias[j] + gs[j];
                        mean_dy = mean_dy + dy;
                        mean_dy_xhat = mean_dy_xhat + dy * xhat;
                    }
                    mean_dy = mean_dy / n;
                    mean_dy_xhat = mean_dy_xhat / n;
                    for j in 0..dim {
                        let xhat = (xs[j] - mean) * rstd;
                        dx[r * dim + j] = rstd * (gs[j] * gv[j] - mean_dy - xhat * mean_dy_xhat);
                    }
                }
                add_into(self, grads, *x, &dx);
                add_into(self, grads, *gain, &dgain);
                add_into(self, grads, *bias, &dbias);
            }
            Op::Conv2d { x, kernel, bias, geom } => {
                let (dx, dk, db) =
                    kernels::conv2d_backward(self.value(*x).data(), self.value(*kernel).data(), gd, geom);
                add_into(self, grads, *x, &dx);
                add_into(self, grads, *kernel, &dk);
                if let Some(b) = bias {
                    add_into(self, grads, *b, &db);
                }
            }
            Op::Concat(inputs, axis) => {
                let (outer, total, inner) = kernels::axis_blocks(g.shape(), *axis);
                let mut start = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    self.accumulate(grads, v, |d| {
                        for o in 0..outer {
                            let src = &gd[(o * total + start) * inner..(o * total + start + len) * inner];
                            let dst = &mut d[o * len * inner..(o + 1) * len * inner];
                            for (x, &y) in dst.iter_mut().zip(src) {
                                *x = *x + y;
                            }
                        }
                    });
                    start += len;
                }
            }
            Op::Gather(a, indices) => {
                self.accumulate(grads, *a, |d| {
                    for (&src, &gv) in indices.iter().zip(gd) {
                        d[src] = d[src] + gv;
                    }
                });
            }
        }
        Ok(())
    }

    /// Elementwise backward: `f(input, index, upstream)` gives the input gradient.
    fn unary(&self, grads: &mut [Option<Tensor<T>>], a: Var, gd: &[T], f: impl Fn(T, usize, T) -> T) {
        let xv = self.value(a).data();
        self.accumulate(grads, a, |d| {
            for i in 0..d.len() {
                d[i] = d[i] + f(xv[i], i, gd[i]);
            }
        });
    }

    fn matmul_backward(&self, a: Var, b: Var, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let plan = ops::MatMulPlan::new(self.shape(a), self.shape(b))?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let gd = g.data();
        let (m, k, n) = (plan.m, plan.k, plan.n);
        self.accumulate(grads, a, |d| {
            for (ob, (ai, bi)) in plan.batches.iter().enumerate() {
                kernels::matmul_bt_acc(
                    &gd[ob * m * n..(ob + 1) * m * n],
                    &bv[bi * k * n..(bi + 1) * k * n],
                    &mut d[ai * m * k..(ai + 1) * m * k],
                    m,
                    n,
                    k,
                );
            }
        });
        self.accumulate(grads, b, |d| {
            for (ob, (ai, bi)) in plan.batches.iter().enumerate() {
                kernels::matmul_at_acc(
                    &av[ai * m * k..(ai + 1) * m * k],
                    &gd[ob * m * n..(ob + 1) * m * n],
                    &mut d[bi * k * n..(bi + 1) * k * n],
                    m,
                    k,
                    n,
                );
            }
        });
        Ok(())
    }
}

fn add_into<T: Scalar>(graph: &Graph<T>, grads: &mut [Option<Tensor<T>>], v: Var, delta: &[T]) {
    graph.accumulate(grads, v, |d| {
        for (x, &y) in d.iter_mut().zip(delta) {
            *x = *x + y;
        }
    });
}

/// Visits every 1-D slice along an axis, passing an index function `at(j)`.
fn for_each_slice(outer: usize, len: usize, inner: usize, mut f: impl FnMut(&dyn Fn(usize) -> usize)) {
    for o in 0..outer {
        for i in 0..inner {
            let at = move |j: usize| (o * len + j) * inner + i;
            f(&at);
        }
    }
}
