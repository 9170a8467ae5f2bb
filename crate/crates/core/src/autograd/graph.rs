use std::collections::HashMap;

use super::kernels::{self, ConvGeometry, GroupStats};
use super::tensor::{gemm, Scalar, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifies one parameter tensor: (store id, index inside the store).
pub type ParamKey = (u64, usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: GroupStats,
    },
    Swish(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddChannelBias {
        x: Var,
        bias: Var,
    },
    Concat(Vec<(Var, usize)>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    Upsample2x(Var),
    AvgPool2x(Var),
    Haar(Var),
    HaarInverse(Var),
    MatMul {
        a: Var,
        ta: bool,
        b: Var,
        tb: bool,
    },
    Softmax(Var),
    Scale(Var, T),
    Reshape(Var),
    MeanAbs(Var),
    MeanSquare(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Define-by-run tape. Each forward pass builds a fresh graph.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamKey, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf. Binding the same key twice returns the same node.
    pub fn param(&mut self, key: ParamKey, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, true);
        self.params.insert(key, v);
        v
    }

    pub fn param_var(&self, key: ParamKey) -> Option<Var> {
        self.params.get(&key).copied()
    }

    /// Same value, cut from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.input(value)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Var {
        let out = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), geom);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Conv2d { x, w, b, geom }, ng)
    }

    /// `x [N, in] · wᵀ [in, out] + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, fin, fout) = (xv.dim(0), xv.dim(1), wv.dim(0));
        assert_eq!(wv.dim(1), fin, "linear: feature mismatch");
        let mut out = Tensor::zeros(&[n, fout]);
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.data_mut().chunks_mut(fout) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(n, fin, fout, xv.data(), false, wv.data(), true, out.data_mut(), b.is_some());
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Linear { x, w, b }, ng)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let (out, stats) =
            kernels::group_norm_forward(self.value(x), self.value(gamma), self.value(beta), groups);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            ng,
        )
    }

    /// `x · sigmoid(x)`.
    pub fn swish(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v / (T::one() + (-v).exp()));
        let ng = self.ng(x);
        self.push(out, Op::Swish(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    /// Adds a per-(batch, channel) bias `[N, C]` to a `[N, C, H, W]` map.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (n, c) = (xv.dim(0), xv.dim(1));
        assert_eq!(bv.shape(), &[n, c], "add_channel_bias shape mismatch");
        let hw = xv.len() / (n * c);
        let mut out = xv.clone();
        for (p, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let s = bv.data()[p];
            plane.iter_mut().for_each(|v| *v += s);
        }
        let ng = self.ng(x) || self.ng(bias);
        self.push(out, Op::AddChannelBias { x, bias }, ng)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_channels(&vals);
        let meta = parts.iter().map(|&p| (p, self.value(p).dim(1))).collect();
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::Concat(meta), ng)
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_channels(start, len);
        let ng = self.ng(x);
        self.push(out, Op::SliceChannels { x, start }, ng)
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let out = kernels::upsample2x(self.value(x));
        let ng = self.ng(x);
        self.push(out, Op::Upsample2x(x), ng)
    }

    pub fn avg_pool2x(&mut self, x: Var) -> Var {
        let out = kernels::avg_pool2x(self.value(x));
        let ng = self.ng(x);
        self.push(out, Op::AvgPool2x(x), ng)
    }

    /// Orthonormal Haar analysis, see [`kernels::haar_forward`].
    pub fn haar(&mut self, x: Var) -> Var {
        let out = kernels::haar_forward(self.value(x));
        let ng = self.ng(x);
        self.push(out, Op::Haar(x), ng)
    }

    pub fn haar_inverse(&mut self, x: Var) -> Var {
        let out = kernels::haar_inverse(self.value(x));
        let ng = self.ng(x);
        self.push(out, Op::HaarInverse(x), ng)
    }

    /// Batched `op(a) · op(b)` on 3-d tensors.
    pub fn matmul(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let out = kernels::batched_matmul(self.value(a), ta, self.value(b), tb);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul { a, ta, b, tb }, ng)
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let out = kernels::softmax_last(self.value(x));
        let ng = self.ng(x);
        self.push(out, Op::Softmax(x), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let out = self.value(x).scale(s);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        let ng = self.ng(x);
        self.push(out, Op::Reshape(x), ng)
    }

    /// Mean of `|x|` as a scalar node.
    pub fn mean_abs(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.data().iter().map(|v| v.abs().as_f64()).sum::<f64>() / xv.len() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(T::from_f64(m)), Op::MeanAbs(x), ng)
    }

    /// Mean of `x²` as a scalar node.
    pub fn mean_square(&mut self, x: Var) -> Var {
        let m = self.value(x).sq_norm() / self.value(x).len() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(T::from_f64(m)), Op::MeanSquare(x), ng)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar node");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(self.value(*x), self.value(*w), g, *geom, self.ng(*x));
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, fin, fout) = (xv.dim(0), xv.dim(1), wv.dim(0));
                if self.ng(*x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    gemm(n, fout, fin, g.data(), false, wv.data(), false, dx.data_mut(), false);
                    self.accumulate(grads, *x, dx);
                }
                let mut dw = Tensor::zeros(wv.shape());
                gemm(fout, n, fin, g.data(), true, xv.data(), false, dw.data_mut(), false);
                self.accumulate(grads, *w, dw);
                if let Some(b) = b {
                    let mut db = Tensor::zeros(&[fout]);
                    for row in g.data().chunks(fout) {
                        for (d, &r) in db.data_mut().iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let (dx, dg, db) = kernels::group_norm_backward(
                    self.value(*x),
                    self.value(*gamma),
                    stats,
                    *groups,
                    g,
                );
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dg);
                self.accumulate(grads, *beta, db);
            }
            Op::Swish(x) => {
                let dx = self.value(*x).zip_map(g, |v, gy| {
                    let s = T::one() / (T::one() + (-v).exp());
                    gy * (s + v * s * (T::one() - s))
                });
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-T::one()));
            }
            Op::AddChannelBias { x, bias } => {
                self.accumulate(grads, *x, g.clone());
                let bshape = self.value(*bias).shape().to_vec();
                let planes: usize = bshape.iter().product();
                let hw = g.len() / planes;
                let db = g.data().chunks(hw).map(|p| p.iter().copied().sum::<T>()).collect();
                self.accumulate(grads, *bias, Tensor::from_vec(&bshape, db));
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &(p, c) in parts {
                    if self.ng(p) {
                        self.accumulate(grads, p, g.slice_channels(start, c));
                    }
                    start += c;
                }
            }
            Op::SliceChannels { x, start } => {
                if !self.ng(*x) {
                    return;
                }
                let xs = self.value(*x).shape();
                let (n, c) = (xs[0], xs[1]);
                let hw = xs[2] * xs[3];
                let len = g.dim(1);
                let mut dx = Tensor::zeros(xs);
                for b in 0..n {
                    let dst = (b * c + start) * hw;
                    dx.data_mut()[dst..dst + len * hw]
                        .copy_from_slice(&g.data()[b * len * hw..(b + 1) * len * hw]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Upsample2x(x) => self.accumulate(grads, *x, kernels::sum_pool2x(g)),
            Op::AvgPool2x(x) => {
                let up = kernels::upsample2x(g).scale(T::from_f64(0.25));
                self.accumulate(grads, *x, up);
            }
            // Orthonormal: the adjoint is the inverse.
            Op::Haar(x) => self.accumulate(grads, *x, kernels::haar_inverse(g)),
            Op::HaarInverse(x) => self.accumulate(grads, *x, kernels::haar_forward(g)),
            Op::MatMul { a, ta, b, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (da, db) = match (ta, tb) {
                    (false, false) => (
                        kernels::batched_matmul(g, false, bv, true),
                        kernels::batched_matmul(av, true, g, false),
                    ),
                    (true, false) => (
                        kernels::batched_matmul(bv, false, g, true),
                        kernels::batched_matmul(av, false, g, false),
                    ),
                    (false, true) => (
                        kernels::batched_matmul(g, false, bv, false),
                        kernels::batched_matmul(g, true, av, false),
                    ),
                    (true, true) => (
                        kernels::batched_matmul(bv, true, g, true),
                        kernels::batched_matmul(g, true, av, true),
                    ),
                };
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Softmax(x) => {
                let last = *out.shape().last().unwrap();
                let mut dx = Tensor::zeros(out.shape());
                for ((d, y), gy) in dx
                    .data_mut()
                    .chunks_mut(last)
                    .zip(out.data().chunks(last))
                    .zip(g.data().chunks(last))
                {
                    let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    for j in 0..last {
                        d[j] = y[j] * (gy[j] - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.scale(*s)),
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshape(&shape));
            }
            Op::MeanAbs(x) => {
                let xv = self.value(*x);
                let k = g.item() / T::from_f64(xv.len() as f64);
                let dx = xv.map(|v| {
                    if v > T::zero() {
                        k
                    } else if v < T::zero() {
                        -k
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *x, dx);
            }
            Op::MeanSquare(x) => {
                let xv = self.value(*x);
                let k = g.item() * T::from_f64(2.0 / xv.len() as f64);
                self.accumulate(grads, *x, xv.scale(k));
            }
        }
    }
}
