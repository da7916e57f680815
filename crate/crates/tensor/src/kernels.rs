//! Forward and adjoint kernels on plain tensors. The tape composes these; they
//! carry no differentiation state of their own.

use crate::element::{Element, MatRef};
use crate::error::{Result, TensorError};
use crate::tensor::{numel, strides, Tensor};

/// `(outer, len, inner)` sizes around `axis`.
pub fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::Axis { op, axis, ndim: shape.len() });
    }
    Ok((numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..])))
}

/// Strides of `rhs` laid over `lhs` (right-aligned), zero on broadcast axes.
pub fn broadcast_strides(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Vec<usize>> {
    let err = || TensorError::Shape { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() };
    if rhs.len() > lhs.len() {
        return Err(err());
    }
    let lead = lhs.len() - rhs.len();
    let rs = strides(rhs);
    let mut out = vec![0; lhs.len()];
    for (i, (&r, &s)) in rhs.iter().zip(&rs).enumerate() {
        let l = lhs[lead + i];
        if r == l {
            out[lead + i] = if r == 1 { 0 } else { s };
        } else if r == 1 {
            out[lead + i] = 0;
        } else {
            return Err(err());
        }
    }
    Ok(out)
}

/// Calls `f(out_index, rhs_index)` for every element of `shape`, in order.
fn for_each_broadcast(shape: &[usize], rstrides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n = numel(shape);
    if shape.is_empty() {
        f(0, 0);
        return;
    }
    let nd = shape.len();
    let last = shape[nd - 1];
    let last_stride = rstrides[nd - 1];
    let mut idx = vec![0usize; nd];
    let mut base = 0usize;
    let mut o = 0;
    while o < n {
        for j in 0..last {
            f(o + j, base + j * last_stride);
        }
        o += last;
        // advance the odometer over all but the last axis
        let mut ax = nd - 1;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            base += rstrides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            base -= rstrides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

pub fn broadcast_binary<T: Element>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let rs = broadcast_strides(op, a.shape(), b.shape())?;
    let mut out = vec![T::zero(); a.len()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(a.shape(), &rs, |o, j| out[o] = f(ad[o], bd[j]));
    Ok(Tensor::from_parts(a.shape().to_vec(), out))
}

/// Sums `values` (shaped like `shape`) down onto `target` under broadcasting.
pub fn reduce_broadcast<T: Element>(values: &[T], shape: &[usize], target: &[usize]) -> Result<Tensor<T>> {
    if shape == target {
        return Ok(Tensor::from_parts(target.to_vec(), values.to_vec()));
    }
    let rs = broadcast_strides("reduce_broadcast", shape, target)?;
    let mut out = vec![T::zero(); numel(target)];
    for_each_broadcast(shape, &rs, |o, j| out[j] += values[o]);
    Ok(Tensor::from_parts(target.to_vec(), out))
}

/// Product of an `m x k` and a `k x n` matrix.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n) = match (a.shape(), b.shape()) {
        ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
        _ => {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            })
        }
    };
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, T::one(), MatRef::rows(a.data(), k), MatRef::rows(b.data(), n), T::zero(), &mut out);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Batched product of `[B, m, k]` and `[B, k, n]`.
pub fn batch_matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (bs, m, k, n) = match (a.shape(), b.shape()) {
        ([b1, m, k], [b2, k2, n]) if b1 == b2 && k == k2 => (*b1, *m, *k, *n),
        _ => {
            return Err(TensorError::Shape {
                op: "batch_matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            })
        }
    };
    let mut out = vec![T::zero(); bs * m * n];
    for i in 0..bs {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            MatRef::rows(&a.data()[i * m * k..(i + 1) * m * k], k),
            MatRef::rows(&b.data()[i * k * n..(i + 1) * k * n], n),
            T::zero(),
            &mut out[i * m * n..(i + 1) * m * n],
        );
    }
    Ok(Tensor::from_parts(vec![bs, m, n], out))
}

pub fn softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = split_axis("softmax", x.shape(), axis)?;
    let xd = x.data();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(xd[at(j)]);
            }
            let mut total = T::zero();
            for j in 0..len {
                let e = (xd[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[at(j)] /= total;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn permute<T: Element>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let nd = x.ndim();
    let mut seen = vec![false; nd];
    if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
        return Err(TensorError::Invalid {
            op: "permute",
            reason: format!("{axes:?} is not a permutation of {nd} axes"),
        });
    }
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    // strides of the input, reordered to walk it in output order
    let walk: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    let xd = x.data();
    for_each_broadcast(&out_shape, &walk, |_, j| out.push(xd[j]));
    Ok(Tensor::from_parts(out_shape, out))
}

pub fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Output spatial size of a convolution.
pub fn conv_out_size(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || size + 2 * pad < kernel {
        return None;
    }
    Some((size + 2 * pad - kernel) / stride + 1)
}

/// Geometry of one 2-d convolution, in the direction input -> output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds a `[C, H, W]` image into `[C*kh*kw, out_h*out_w]` patch columns.
pub fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    if g.is_pointwise() {
        cols.copy_from_slice(x);
        return;
    }
    let ncols = g.col_cols();
    for c in 0..g.channels {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if y < 0 || y >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.height + y as usize) * g.width..][..g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let xx = (ox * g.stride + j) as isize - g.pad as isize;
                        *v = if xx < 0 || xx >= g.width as isize { T::zero() } else { src[xx as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch columns back into `[C, H, W]`.
pub fn col2im<T: Element>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    if g.is_pointwise() {
        for (d, &s) in x.iter_mut().zip(cols) {
            *d += s;
        }
        return;
    }
    let ncols = g.col_cols();
    for c in 0..g.channels {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let dst = &mut x[(c * g.height + y as usize) * g.width..][..g.width];
                    for ox in 0..g.out_w {
                        let xx = (ox * g.stride + j) as isize - g.pad as isize;
                        if xx >= 0 && xx < g.width as isize {
                            dst[xx as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Validates `x: [N, Cin, H, W]`, `w: [Cout, Cin, kh, kw]` and returns the
/// batch size, output channels and geometry.
pub fn conv2d_geom(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<(usize, usize, ConvGeom)> {
    let err = || TensorError::Shape { op: "conv2d", lhs: x.to_vec(), rhs: w.to_vec() };
    let ([n, cin, h, wd], [cout, cin2, kh, kw]) = (x, w) else { return Err(err()) };
    if cin != cin2 {
        return Err(err());
    }
    let (Some(oh), Some(ow)) = (conv_out_size(*h, *kh, stride, pad), conv_out_size(*wd, *kw, stride, pad)) else {
        return Err(err());
    };
    let g = ConvGeom {
        channels: *cin,
        height: *h,
        width: *wd,
        kh: *kh,
        kw: *kw,
        stride,
        pad,
        out_h: oh,
        out_w: ow,
    };
    Ok((*n, *cout, g))
}

pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, cout, g) = conv2d_geom(x.shape(), w.shape(), stride, pad)?;
    check_bias("conv2d", bias, cout)?;
    let (k, hw) = (g.col_rows(), g.col_cols());
    let in_len = g.channels * g.height * g.width;
    let mut cols = vec![T::zero(); k * hw];
    let mut out = vec![T::zero(); n * cout * hw];
    for b in 0..n {
        im2col(&x.data()[b * in_len..(b + 1) * in_len], &g, &mut cols);
        let dst = &mut out[b * cout * hw..(b + 1) * cout * hw];
        T::gemm(cout, k, hw, T::one(), MatRef::rows(w.data(), k), MatRef::rows(&cols, hw), T::zero(), dst);
        if let Some(bias) = bias {
            for (c, &bv) in bias.data().iter().enumerate() {
                dst[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, cout, g.out_h, g.out_w], out))
}

/// Gradients of [`conv2d`] with respect to the requested operands.
#[allow(clippy::type_complexity)]
pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    want: [bool; 3],
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (n, cout, g) = conv2d_geom(x.shape(), w.shape(), stride, pad)?;
    let (k, hw) = (g.col_rows(), g.col_cols());
    let in_len = g.channels * g.height * g.width;
    let mut gx = want[0].then(|| vec![T::zero(); x.len()]);
    let mut gw = want[1].then(|| vec![T::zero(); w.len()]);
    let mut gb = want[2].then(|| vec![T::zero(); cout]);
    let mut cols = vec![T::zero(); k * hw];
    for b in 0..n {
        let go = &grad_out.data()[b * cout * hw..(b + 1) * cout * hw];
        if let Some(gw) = gw.as_mut() {
            im2col(&x.data()[b * in_len..(b + 1) * in_len], &g, &mut cols);
            T::gemm(cout, hw, k, T::one(), MatRef::rows(go, hw), MatRef::transposed(&cols, hw), T::one(), gw);
        }
        if let Some(gx) = gx.as_mut() {
            T::gemm(k, cout, hw, T::one(), MatRef::transposed(w.data(), k), MatRef::rows(go, hw), T::zero(), &mut cols);
            col2im(&cols, &g, &mut gx[b * in_len..(b + 1) * in_len]);
        }
        if let Some(gb) = gb.as_mut() {
            for (c, acc) in gb.iter_mut().enumerate() {
                *acc += go[c * hw..(c + 1) * hw].iter().copied().sum::<T>();
            }
        }
    }
    Ok((
        gx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        gw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
        gb.map(|d| Tensor::from_parts(vec![cout], d)),
    ))
}

/// Validates `x: [N, Cin, H, W]`, `w: [Cin, Cout, kh, kw]` for a transposed
/// convolution. The returned geometry describes the equivalent forward
/// convolution that maps the (larger) output back onto `x`.
pub fn conv_transpose2d_geom(
    x: &[usize],
    w: &[usize],
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, ConvGeom)> {
    let err = || TensorError::Shape { op: "conv_transpose2d", lhs: x.to_vec(), rhs: w.to_vec() };
    let ([n, cin, h, wd], [cin2, cout, kh, kw]) = (x, w) else { return Err(err()) };
    if cin != cin2 || stride == 0 {
        return Err(err());
    }
    let oh = ((h - 1) * stride + kh).checked_sub(2 * pad).filter(|&v| v > 0).ok_or_else(err)?;
    let ow = ((wd - 1) * stride + kw).checked_sub(2 * pad).filter(|&v| v > 0).ok_or_else(err)?;
    let g = ConvGeom {
        channels: *cout,
        height: oh,
        width: ow,
        kh: *kh,
        kw: *kw,
        stride,
        pad,
        out_h: *h,
        out_w: *wd,
    };
    Ok((*n, *cin, g))
}

pub fn conv_transpose2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, cin, g) = conv_transpose2d_geom(x.shape(), w.shape(), stride, pad)?;
    check_bias("conv_transpose2d", bias, g.channels)?;
    let (k, hw) = (g.col_rows(), g.col_cols());
    let out_len = g.channels * g.height * g.width;
    let mut cols = vec![T::zero(); k * hw];
    let mut out = vec![T::zero(); n * out_len];
    for b in 0..n {
        let xb = &x.data()[b * cin * hw..(b + 1) * cin * hw];
        T::gemm(k, cin, hw, T::one(), MatRef::transposed(w.data(), k), MatRef::rows(xb, hw), T::zero(), &mut cols);
        let dst = &mut out[b * out_len..(b + 1) * out_len];
        col2im(&cols, &g, dst);
        if let Some(bias) = bias {
            let plane = g.height * g.width;
            for (c, &bv) in bias.data().iter().enumerate() {
                dst[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, g.channels, g.height, g.width], out))
}

#[allow(clippy::type_complexity)]
pub fn conv_transpose2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    want: [bool; 3],
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (n, cin, g) = conv_transpose2d_geom(x.shape(), w.shape(), stride, pad)?;
    let (k, hw) = (g.col_rows(), g.col_cols());
    let out_len = g.channels * g.height * g.width;
    let plane = g.height * g.width;
    let mut gx = want[0].then(|| vec![T::zero(); x.len()]);
    let mut gw = want[1].then(|| vec![T::zero(); w.len()]);
    let mut gb = want[2].then(|| vec![T::zero(); g.channels]);
    let mut cols = vec![T::zero(); k * hw];
    for b in 0..n {
        let go = &grad_out.data()[b * out_len..(b + 1) * out_len];
        if gx.is_some() || gw.is_some() {
            im2col(go, &g, &mut cols);
        }
        if let Some(gx) = gx.as_mut() {
            let dst = &mut gx[b * cin * hw..(b + 1) * cin * hw];
            T::gemm(cin, k, hw, T::one(), MatRef::rows(w.data(), k), MatRef::rows(&cols, hw), T::zero(), dst);
        }
        if let Some(gw) = gw.as_mut() {
            let xb = &x.data()[b * cin * hw..(b + 1) * cin * hw];
            T::gemm(cin, hw, k, T::one(), MatRef::rows(xb, hw), MatRef::transposed(&cols, hw), T::one(), gw);
        }
        if let Some(gb) = gb.as_mut() {
            for (c, acc) in gb.iter_mut().enumerate() {
                *acc += go[c * plane..(c + 1) * plane].iter().copied().sum::<T>();
            }
        }
    }
    Ok((
        gx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        gw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
        gb.map(|d| Tensor::from_parts(vec![g.channels], d)),
    ))
}

fn check_bias<T: Element>(op: &'static str, bias: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [channels] => Err(TensorError::Shape {
            op,
            lhs: vec![channels],
            rhs: b.shape().to_vec(),
        }),
        _ => Ok(()),
    }
}

/// Per-position layer-norm statistics along one axis.
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    axis: usize,
    eps: f64,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let (outer, len, inner) = split_axis("layer_norm", x.shape(), axis)?;
    for p in [gamma, beta] {
        if p.shape() != [len] {
            return Err(TensorError::Shape { op: "layer_norm", lhs: x.shape().to_vec(), rhs: p.shape().to_vec() });
        }
    }
    let xd = x.data();
    let (gd, bd) = (gamma.data(), beta.data());
    let inv_len = T::cast(1.0 / len as f64);
    let eps = T::cast(eps);
    let mut out = vec![T::zero(); x.len()];
    let mut mean = vec![T::zero(); outer * inner];
    let mut rstd = vec![T::zero(); outer * inner];
    for o in 0..outer {
        let base = o * len * inner;
        // accumulate over the normalized axis with the inner axis contiguous
        let mu = &mut mean[o * inner..(o + 1) * inner];
        for j in 0..len {
            for (m, &v) in mu.iter_mut().zip(&xd[base + j * inner..base + (j + 1) * inner]) {
                *m += v;
            }
        }
        mu.iter_mut().for_each(|m| *m *= inv_len);
        let rs = &mut rstd[o * inner..(o + 1) * inner];
        for j in 0..len {
            for ((r, &m), &v) in rs.iter_mut().zip(mu.iter()).zip(&xd[base + j * inner..base + (j + 1) * inner]) {
                let d = v - m;
                *r += d * d;
            }
        }
        rs.iter_mut().for_each(|r| *r = T::one() / (*r * inv_len + eps).sqrt());
        for j in 0..len {
            let off = base + j * inner;
            for i in 0..inner {
                out[off + i] = (xd[off + i] - mu[i]) * rs[i] * gd[j] + bd[j];
            }
        }
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), NormStats { mean, rstd }))
}

/// Gradients of [`layer_norm`] for input, gain and shift.
pub fn layer_norm_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &NormStats<T>,
    grad_out: &Tensor<T>,
    axis: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (outer, len, inner) = split_axis("layer_norm", x.shape(), axis)?;
    let (xd, gd, god) = (x.data(), gamma.data(), grad_out.data());
    let inv_len = T::cast(1.0 / len as f64);
    let mut gx = vec![T::zero(); x.len()];
    let mut ggamma = vec![T::zero(); len];
    let mut gbeta = vec![T::zero(); len];
    let mut sum_g = vec![T::zero(); inner];
    let mut sum_gx = vec![T::zero(); inner];
    for o in 0..outer {
        let base = o * len * inner;
        let mu = &stats.mean[o * inner..(o + 1) * inner];
        let rs = &stats.rstd[o * inner..(o + 1) * inner];
        sum_g.fill(T::zero());
        sum_gx.fill(T::zero());
        for j in 0..len {
            let off = base + j * inner;
            for i in 0..inner {
                let xhat = (xd[off + i] - mu[i]) * rs[i];
                let g = god[off + i];
                ggamma[j] += g * xhat;
                gbeta[j] += g;
                let gh = g * gd[j];
                sum_g[i] += gh;
                sum_gx[i] += gh * xhat;
            }
        }
        for j in 0..len {
            let off = base + j * inner;
            for i in 0..inner {
                let xhat = (xd[off + i] - mu[i]) * rs[i];
                let gh = god[off + i] * gd[j];
                gx[off + i] = rs[i] * (gh - sum_g[i] * inv_len - xhat * sum_gx[i] * inv_len);
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(vec![len], ggamma),
        Tensor::from_parts(vec![len], gbeta),
    ))
}

pub fn concat<T: Element>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = xs.first().ok_or_else(|| TensorError::Invalid { op: "concat", reason: "nothing to concatenate".into() })?;
    let (outer, _, inner) = split_axis("concat", first.shape(), axis)?;
    let mut total = 0;
    for t in xs {
        let compatible = t.ndim() == first.ndim()
            && t.shape().iter().zip(first.shape()).enumerate().all(|(a, (p, q))| a == axis || p == q);
        if !compatible {
            return Err(TensorError::Shape { op: "concat", lhs: first.shape().to_vec(), rhs: t.shape().to_vec() });
        }
        total += t.shape()[axis];
    }
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in xs {
            let chunk = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, out))
}

/// Rows of `x` (axis 0) picked by `indices`.
pub fn gather_rows<T: Element>(x: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
    let rows = *x.shape().first().ok_or(TensorError::Axis { op: "gather", axis: 0, ndim: 0 })?;
    let width = x.len() / rows;
    let mut out = Vec::with_capacity(indices.len() * width);
    for (pos, &r) in indices.iter().enumerate() {
        if r >= rows {
            return Err(TensorError::Index { op: "gather", coordinate: pos, index: r, bound: rows });
        }
        out.extend_from_slice(&x.data()[r * width..(r + 1) * width]);
    }
    if indices.is_empty() {
        return Err(TensorError::Invalid { op: "gather", reason: "empty index list".into() });
    }
    let mut shape = vec![indices.len()];
    shape.extend_from_slice(&x.shape()[1..]);
    Ok(Tensor::from_parts(shape, out))
}

pub fn scatter_add_rows<T: Element>(grad: &[T], indices: &[usize], shape: &[usize]) -> Tensor<T> {
    let width = numel(&shape[1..]);
    let mut out = vec![T::zero(); numel(shape)];
    for (k, &r) in indices.iter().enumerate() {
        for (d, &s) in out[r * width..(r + 1) * width].iter_mut().zip(&grad[k * width..(k + 1) * width]) {
            *d += s;
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

/// Mean over the trailing `H, W` axes of `[N, C, H, W]`.
pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape() else {
        return Err(TensorError::Invalid { op: "global_avg_pool", reason: format!("expected [N, C, H, W], got {:?}", x.shape()) });
    };
    let plane = h * w;
    let scale = T::cast(1.0 / plane as f64);
    let out = x.data().chunks(plane).map(|p| p.iter().copied().sum::<T>() * scale).collect();
    Ok(Tensor::from_parts(vec![*n, *c], out))
}

/// Non-overlapping `k x k` average pooling of `[N, C, H, W]`.
pub fn avg_pool<T: Element>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape() else {
        return Err(TensorError::Invalid { op: "avg_pool", reason: format!("expected [N, C, H, W], got {:?}", x.shape()) });
    };
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(TensorError::Invalid { op: "avg_pool", reason: format!("{h}x{w} not divisible by {k}") });
    }
    let (oh, ow) = (h / k, w / k);
    let scale = T::cast(1.0 / (k * k) as f64);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for (p, plane) in x.data().chunks(h * w).enumerate() {
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..*h {
            for xx in 0..*w {
                dst[(y / k) * ow + xx / k] += plane[y * w + xx];
            }
        }
        dst.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(Tensor::from_parts(vec![*n, *c, oh, ow], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_strides("t", &[2, 3, 4], &[4]).unwrap(), vec![0, 0, 1]);
        assert_eq!(broadcast_strides("t", &[2, 3, 4], &[3, 1]).unwrap(), vec![0, 1, 0]);
        assert!(broadcast_strides("t", &[2, 3], &[2]).is_err());
    }

    #[test]
    fn channel_broadcast_add() {
        let x = Tensor::<f64>::zeros(&[1, 2, 2, 2]);
        let b = Tensor::new(vec![1, 2, 1, 1], vec![1.0, 2.0]).unwrap();
        let y = broadcast_binary("add", &x, &b, |p, q| p + q).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
        let r = reduce_broadcast(y.data(), y.shape(), b.shape()).unwrap();
        assert_eq!(r.data(), &[4.0, 8.0]);
    }

    #[test]
    fn permute_matches_manual_transpose() {
        let x = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64);
        let t = permute(&x, &[1, 0]).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn conv_geometry() {
        let (_, _, g) = conv2d_geom(&[1, 32, 32, 32], &[64, 32, 4, 4], 2, 1).unwrap();
        assert_eq!((g.out_h, g.out_w), (16, 16));
        let (_, cin, g) = conv_transpose2d_geom(&[1, 64, 16, 16], &[64, 32, 2, 2], 2, 0).unwrap();
        assert_eq!((cin, g.channels, g.height, g.width), (64, 32, 32, 32));
    }

    #[test]
    fn gather_reports_offending_position() {
        let x = Tensor::<f32>::zeros(&[3, 2]);
        let err = gather_rows(&x, &[0, 2, 5]).unwrap_err();
        assert_eq!(err, TensorError::Index { op: "gather", coordinate: 2, index: 5, bound: 3 });
    }
}
