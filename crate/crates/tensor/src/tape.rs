//! Reverse-mode differentiation over an explicit operation record.
//!
//! Every differentiable operation appends one node holding its output value
//! and the handles of its inputs. Nodes only ever reference earlier nodes, so
//! walking the record backwards is a valid reverse topological order.

use crate::element::{Element, MatRef};
use crate::error::{Result, TensorError};
use crate::kernels::{self, NormStats};
use crate::tensor::Tensor;

/// Epsilon added to the variance in [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Gelu,
    Sigmoid,
    Relu,
    Sqrt,
    Abs,
    Square,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Unary(Var, Unary),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Sum(Var),
    Mean(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, axis: usize, stats: NormStats<T> },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    GlobalAvgPool(Var),
    AvgPool { x: Var, k: usize },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Gather { x: Var, indices: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradient buffers produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// The computation record for one forward/backward pass.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// `a + b`, with `b` broadcast onto the shape of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::broadcast_binary("add", self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    /// `a - b`, with `b` broadcast onto the shape of `a`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::broadcast_binary("sub", self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// `a * b` elementwise, with `b` broadcast onto the shape of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::broadcast_binary("mul", self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::cast(c);
        let v = self.value(x).map(|e| e * c);
        self.push(v, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::cast(c);
        let v = self.value(x).map(|e| e + c);
        self.push(v, Op::AddScalar(x), &[x])
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Var {
        let v = self.value(x).map(|e| unary_forward(f, e));
        self.push(v, Op::Unary(x, f), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::batch_matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::BatchMatMul(a, b), &[a, b]))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / T::cast(t.len() as f64));
        self.push(v, Op::Mean(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = kernels::softmax(self.value(x), axis)?;
        Ok(self.push(v, Op::Softmax { x, axis }, &[x]))
    }

    /// Normalizes each slice along `axis` to zero mean and unit variance, then
    /// applies the per-position gain `gamma` and shift `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, axis: usize) -> Result<Var> {
        let (v, stats) = kernels::layer_norm(self.value(x), self.value(gamma), self.value(beta), axis, LAYER_NORM_EPS)?;
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta, axis, stats }, &[x, gamma, beta]))
    }

    /// 2-d cross-correlation of `[N, Cin, H, W]` with `[Cout, Cin, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let v = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(v, Op::Conv2d { x, w, b, stride, pad }, &inputs))
    }

    /// Transposed convolution with weights `[Cin, Cout, kh, kw]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let v = kernels::conv_transpose2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(v, Op::ConvTranspose2d { x, w, b, stride, pad }, &inputs))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let v = kernels::global_avg_pool(self.value(x))?;
        Ok(self.push(v, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let v = kernels::avg_pool(self.value(x), k)?;
        Ok(self.push(v, Op::AvgPool { x, k }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let v = kernels::permute(self.value(x), axes)?;
        Ok(self.push(v, Op::Permute { x, axes: axes.to_vec() }, &[x]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nd = self.value(x).ndim();
        if nd < 2 {
            return Err(TensorError::Axis { op: "transpose", axis: 1, ndim: nd });
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(x, &axes)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let v = kernels::concat(&values, axis)?;
        Ok(self.push(v, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    /// Rows of `x` along axis 0. The backward pass scatter-adds into the
    /// source rows, so repeated indices accumulate.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let v = kernels::gather_rows(self.value(x), &indices)?;
        Ok(self.push(v, Op::Gather { x, indices }, &[x]))
    }

    /// Runs the reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor<T>| accumulate(grads, v, t);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.clone());
                }
                if self.needs(*b) {
                    let mut gb = kernels::reduce_broadcast(g.data(), g.shape(), self.shape(*b))?;
                    if matches!(node.op, Op::Sub(..)) {
                        gb = gb.map(|e| -e);
                    }
                    acc(*b, gb);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    acc(*a, kernels::broadcast_binary("mul", g, self.value(*b), |p, q| p * q)?);
                }
                if self.needs(*b) {
                    let ga = g.zip_map(self.value(*a), |p, q| p * q)?;
                    acc(*b, kernels::reduce_broadcast(ga.data(), ga.shape(), self.shape(*b))?);
                }
            }
            Op::Scale(x, c) => acc(*x, g.map(|e| e * *c)),
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::Unary(x, f) => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .zip(node.value.data())
                    .map(|((&gi, &xi), &yi)| gi * unary_derivative(*f, xi, yi))
                    .collect();
                acc(*x, Tensor::from_parts(xv.shape().to_vec(), data));
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.needs(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), MatRef::rows(g.data(), n), MatRef::transposed(bv.data(), n), T::zero(), &mut ga);
                    acc(*a, Tensor::from_parts(vec![m, k], ga));
                }
                if self.needs(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), MatRef::transposed(av.data(), k), MatRef::rows(g.data(), n), T::zero(), &mut gb);
                    acc(*b, Tensor::from_parts(vec![k, n], gb));
                }
            }
            Op::BatchMatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (bs, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
                let gd = g.data();
                if self.needs(*a) {
                    let mut ga = vec![T::zero(); bs * m * k];
                    for i in 0..bs {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            MatRef::rows(&gd[i * m * n..(i + 1) * m * n], n),
                            MatRef::transposed(&bv.data()[i * k * n..(i + 1) * k * n], n),
                            T::zero(),
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                    acc(*a, Tensor::from_parts(av.shape().to_vec(), ga));
                }
                if self.needs(*b) {
                    let mut gb = vec![T::zero(); bs * k * n];
                    for i in 0..bs {
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            MatRef::transposed(&av.data()[i * m * k..(i + 1) * m * k], k),
                            MatRef::rows(&gd[i * m * n..(i + 1) * m * n], n),
                            T::zero(),
                            &mut gb[i * k * n..(i + 1) * k * n],
                        );
                    }
                    acc(*b, Tensor::from_parts(bv.shape().to_vec(), gb));
                }
            }
            Op::Sum(x) => {
                let gi = g.data()[0];
                acc(*x, Tensor::full(self.shape(*x), gi));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let gi = g.data()[0] / T::cast(n as f64);
                acc(*x, Tensor::full(self.shape(*x), gi));
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = kernels::split_axis("softmax", node.value.shape(), *axis)?;
                let (y, gd) = (node.value.data(), g.data());
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: T = (0..len).map(|j| gd[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                acc(*x, Tensor::from_parts(node.value.shape().to_vec(), gx));
            }
            Op::LayerNorm { x, gamma, beta, axis, stats } => {
                let (gx, gg, gb) = kernels::layer_norm_backward(self.value(*x), self.value(*gamma), stats, g, *axis)?;
                if self.needs(*x) {
                    acc(*x, gx);
                }
                if self.needs(*gamma) {
                    acc(*gamma, gg);
                }
                if self.needs(*beta) {
                    acc(*beta, gb);
                }
            }
            Op::Conv2d { x, w, b, stride, pad } | Op::ConvTranspose2d { x, w, b, stride, pad } => {
                let want = [self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b))];
                let (gx, gw, gb) = if matches!(node.op, Op::Conv2d { .. }) {
                    kernels::conv2d_backward(self.value(*x), self.value(*w), g, *stride, *pad, want)?
                } else {
                    kernels::conv_transpose2d_backward(self.value(*x), self.value(*w), g, *stride, *pad, want)?
                };
                if let Some(gx) = gx {
                    acc(*x, gx);
                }
                if let Some(gw) = gw {
                    acc(*w, gw);
                }
                if let (Some(b), Some(gb)) = (b, gb) {
                    acc(*b, gb);
                }
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.shape(*x);
                let plane = shape[2] * shape[3];
                let scale = T::cast(1.0 / plane as f64);
                let mut gx = Vec::with_capacity(plane * g.len());
                for &gi in g.data() {
                    gx.extend(std::iter::repeat_n(gi * scale, plane));
                }
                acc(*x, Tensor::from_parts(shape.to_vec(), gx));
            }
            Op::AvgPool { x, k } => {
                let shape = self.shape(*x).to_vec();
                let (h, w) = (shape[2], shape[3]);
                let (oh, ow) = (h / k, w / k);
                let scale = T::cast(1.0 / (k * k) as f64);
                let mut gx = vec![T::zero(); self.value(*x).len()];
                for (p, plane) in gx.chunks_mut(h * w).enumerate() {
                    let src = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                    for y in 0..h {
                        for xx in 0..w {
                            plane[y * w + xx] = src[(y / k) * ow + xx / k] * scale;
                        }
                    }
                }
                acc(*x, Tensor::from_parts(shape, gx));
            }
            Op::Reshape(x) => acc(*x, g.clone().reshape(self.shape(*x))?),
            Op::Permute { x, axes } => acc(*x, kernels::permute(g, &kernels::inverse_permutation(axes))?),
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = kernels::split_axis("concat", g.shape(), *axis)?;
                let mut offset = 0;
                for &v in xs {
                    let shape = self.shape(v).to_vec();
                    let len = shape[*axis];
                    if self.needs(v) {
                        let mut part = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            part.extend_from_slice(&g.data()[start..start + len * inner]);
                        }
                        acc(v, Tensor::from_parts(shape, part));
                    }
                    offset += len;
                }
            }
            Op::Gather { x, indices } => {
                acc(*x, kernels::scatter_add_rows(g.data(), indices, self.shape(*x)));
            }
        }
        Ok(())
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (d, s) in existing.data_mut().iter_mut().zip(t.data()) {
                *d += *s;
            }
        }
        slot @ None => *slot = Some(t),
    }
}

fn unary_forward<T: Element>(f: Unary, x: T) -> T {
    match f {
        Unary::Gelu => T::cast(0.5) * x * (T::one() + (x * T::cast(std::f64::consts::FRAC_1_SQRT_2)).erf()),
        Unary::Sigmoid => T::one() / (T::one() + (-x).exp()),
        Unary::Relu => x.max(T::zero()),
        Unary::Sqrt => x.sqrt(),
        Unary::Abs => x.abs(),
        Unary::Square => x * x,
    }
}

fn unary_derivative<T: Element>(f: Unary, x: T, y: T) -> T {
    match f {
        Unary::Gelu => {
            let cdf = T::cast(0.5) * (T::one() + (x * T::cast(std::f64::consts::FRAC_1_SQRT_2)).erf());
            let pdf = (-(x * x) * T::cast(0.5)).exp() * T::cast(1.0 / (2.0 * std::f64::consts::PI).sqrt());
            cdf + x * pdf
        }
        Unary::Sigmoid => y * (T::one() - y),
        Unary::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Unary::Sqrt => T::cast(0.5) / y,
        Unary::Abs => x.signum() * if x == T::zero() { T::zero() } else { T::one() },
        Unary::Square => T::cast(2.0) * x,
    }
}
