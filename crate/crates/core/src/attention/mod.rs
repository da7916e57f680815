//! Dilated regional attention, the window-attention baseline, and an exact
//! masked global-attention oracle.
//!
//! Both local operators share one kernel: project to queries, keys and
//! values, gather each query's sources through a [`SourceMap`], add the
//! relative position bias, and take a per-head softmax over the gathered
//! logits:
//!
//! ```text
//! out_i = softmax((q_i k_j^T + B(i, j)) / sqrt(d_head))_j  v_j,   j in sources(i)
//! ```

mod region;

pub use region::{region_indices, regional_map, window_map, SourceMap};

use rand::Rng;
use rasm_tensor::{Element, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape parameters of one attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Side length of the square region; a region holds `region_size^2` sources.
    pub region_size: usize,
    /// Stride between neighbouring region elements.
    pub dilation: usize,
    pub num_heads: usize,
    pub embed_dim: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.region_size == 0 || self.region_size % 2 == 0 {
            return Err(Error::Config(format!("region size must be odd and positive, got {}", self.region_size)));
        }
        if self.dilation == 0 {
            return Err(Error::Config("dilation must be positive".into()));
        }
        if self.num_heads == 0 || self.embed_dim == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide embedding width {}",
                self.num_heads, self.embed_dim
            )));
        }
        Ok(())
    }

    /// Extent of the dilated region along one axis.
    pub fn span(&self) -> usize {
        self.dilation * (self.region_size - 1) + 1
    }

    pub fn check_fits(&self, height: usize, width: usize) -> Result<()> {
        self.validate()?;
        if self.span() > height.min(width) {
            return Err(Error::Config(format!(
                "region {r}x{r} with dilation {d} spans {s} pixels, larger than the {height}x{width} feature map",
                r = self.region_size,
                d = self.dilation,
                s = self.span()
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn table_side(&self) -> usize {
        2 * self.region_size - 1
    }
}

/// Parameter values of one attention layer. Projections act on row vectors
/// (`x · w + b`); `rel_bias` is `[heads, side, side]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T = f32> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub rel_bias: Tensor<T>,
}

impl<T: Element> AttentionWeights<T> {
    /// Random weights with standard deviation `std` everywhere, including
    /// biases and the position table.
    pub fn random<R: Rng + ?Sized>(embed_dim: usize, heads: usize, table_side: usize, std: f64, rng: &mut R) -> Self {
        let d = embed_dim;
        Self {
            wq: Tensor::randn(&[d, d], std, rng),
            bq: Tensor::randn(&[d], std, rng),
            wk: Tensor::randn(&[d, d], std, rng),
            bk: Tensor::randn(&[d], std, rng),
            wv: Tensor::randn(&[d, d], std, rng),
            bv: Tensor::randn(&[d], std, rng),
            wo: Tensor::randn(&[d, d], std, rng),
            bo: Tensor::randn(&[d], std, rng),
            rel_bias: Tensor::randn(&[heads, table_side, table_side], std, rng),
        }
    }

    pub fn tensors(&self) -> [&Tensor<T>; 9] {
        [&self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo, &self.rel_bias]
    }

    pub fn from_tensors(t: [Tensor<T>; 9]) -> Self {
        let [wq, bq, wk, bk, wv, bv, wo, bo, rel_bias] = t;
        Self { wq, bq, wk, bk, wv, bv, wo, bo, rel_bias }
    }

    /// Records every tensor on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> AttentionParams {
        let v: Vec<Var> = self.tensors().iter().map(|t| tape.leaf((*t).clone(), requires_grad)).collect();
        AttentionParams::from_slice(&v)
    }
}

/// Tape handles for the parameters of one attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub rel_bias: Var,
}

impl AttentionParams {
    /// From handles in the order of [`AttentionWeights::tensors`].
    pub fn from_slice(v: &[Var]) -> Self {
        Self {
            wq: v[0],
            bq: v[1],
            wk: v[2],
            bk: v[3],
            wv: v[4],
            bv: v[5],
            wo: v[6],
            bo: v[7],
            rel_bias: v[8],
        }
    }

    pub fn vars(&self) -> [Var; 9] {
        [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo, self.rel_bias]
    }
}

/// Output of the shared kernel: attended features `[N, n, d]` and the
/// post-softmax weights `[N * heads * n, 1, sources]`.
struct Attended {
    out: Var,
    weights: Var,
}

fn project<T: Element>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    Ok(rasm_tensor::nn::linear(tape, x, w, b)?)
}

fn attend<T: Element>(tape: &mut Tape<T>, x: Var, p: &AttentionParams, map: &SourceMap, heads: usize) -> Result<Attended> {
    let &[batch, n, d] = tape.shape(x) else {
        return Err(Error::Dimension(format!("attention input must be [N, n, d], got {:?}", tape.shape(x))));
    };
    if n != map.queries() {
        return Err(Error::Config(format!(
            "{n} tokens do not form the {}x{} feature map",
            map.height, map.width
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide embedding width {d}")));
    }
    let side = map.table_side;
    if tape.shape(p.rel_bias) != [heads, side, side] {
        return Err(Error::Dimension(format!(
            "position bias table {:?} does not match [{heads}, {side}, {side}]",
            tape.shape(p.rel_bias)
        )));
    }
    let dh = d / heads;
    let s = map.sources_per_query;
    let b = batch * heads * n;

    let rows = tape.reshape(x, &[batch * n, d])?;
    let q = project(tape, rows, p.wq, p.bq)?;
    let k = project(tape, rows, p.wk, p.bk)?;
    let v = project(tape, rows, p.wv, p.bv)?;

    // queries: [N, n, h, dh] -> [N, h, n, dh] -> [B, 1, dh]
    let q = tape.reshape(q, &[batch, n, heads, dh])?;
    let q = tape.permute(q, &[0, 2, 1, 3])?;
    let q = tape.reshape(q, &[b, 1, dh])?;

    let mut src = Vec::with_capacity(batch * n * s);
    for bi in 0..batch {
        src.extend(map.sources.iter().map(|&j| bi * n + j));
    }
    // keys: [N*n*s, d] -> [N, n, s, h, dh] -> [N, h, n, dh, s] -> [B, dh, s]
    let kg = tape.gather(k, src.clone())?;
    let kg = tape.reshape(kg, &[batch, n, s, heads, dh])?;
    let kg = tape.permute(kg, &[0, 3, 1, 4, 2])?;
    let kt = tape.reshape(kg, &[b, dh, s])?;
    // values: [N*n*s, d] -> [N, n, s, h, dh] -> [N, h, n, s, dh] -> [B, s, dh]
    let vg = tape.gather(v, src)?;
    let vg = tape.reshape(vg, &[batch, n, s, heads, dh])?;
    let vg = tape.permute(vg, &[0, 3, 1, 2, 4])?;
    let vg = tape.reshape(vg, &[b, s, dh])?;

    let logits = tape.batch_matmul(q, kt)?;

    let table = tape.reshape(p.rel_bias, &[heads * side * side, 1])?;
    let mut slots = Vec::with_capacity(b * s);
    for _ in 0..batch {
        for h in 0..heads {
            slots.extend(map.bias_slots.iter().map(|&t| h * side * side + t));
        }
    }
    let bias = tape.gather(table, slots)?;
    let bias = tape.reshape(bias, &[b, 1, s])?;
    let logits = tape.add(logits, bias)?;
    let logits = tape.scale(logits, 1.0 / (dh as f64).sqrt());
    let weights = tape.softmax(logits, 2)?;

    let out = tape.batch_matmul(weights, vg)?;
    let out = tape.reshape(out, &[batch, heads, n, dh])?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    let out = tape.reshape(out, &[batch * n, d])?;
    let out = project(tape, out, p.wo, p.bo)?;
    let out = tape.reshape(out, &[batch, n, d])?;
    Ok(Attended { out, weights })
}

/// Dilated regional attention over tokens `x: [N, H'*W', d]` laid out
/// row-major on an `height x width` grid.
pub fn regional_attention<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    params: &AttentionParams,
    config: &AttentionConfig,
    height: usize,
    width: usize,
) -> Result<Var> {
    check_embed(tape, x, config)?;
    let map = regional_map(height, width, config)?;
    Ok(attend(tape, x, params, &map, config.num_heads)?.out)
}

/// Non-overlapping window attention, optionally on a cyclically shifted grid.
/// The bias table has side `2 * window - 1`.
pub fn window_attention<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    params: &AttentionParams,
    heads: usize,
    window: usize,
    shift: usize,
    height: usize,
    width: usize,
) -> Result<Var> {
    let map = window_map(height, width, window, shift)?;
    Ok(attend(tape, x, params, &map, heads)?.out)
}

fn check_embed<T: Element>(tape: &Tape<T>, x: Var, config: &AttentionConfig) -> Result<()> {
    config.validate()?;
    match tape.shape(x) {
        [_, _, d] if *d == config.embed_dim => Ok(()),
        s => Err(Error::Dimension(format!(
            "attention input {s:?} does not have embedding width {}",
            config.embed_dim
        ))),
    }
}

/// Reference attention over all `n x n` pairs: logits of pairs not marked in
/// `allowed` are set to negative infinity, `pair_bias` (`[heads, n, n]`) is
/// added before scaling. Direct loops in 64-bit, no tape.
pub fn global_attention_oracle<T: Element>(
    x: &Tensor<T>,
    w: &AttentionWeights<T>,
    heads: usize,
    allowed: &[bool],
    pair_bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    Ok(oracle(x, w, heads, allowed, pair_bias)?.0)
}

/// Post-softmax weights `[heads, n, n]` of [`global_attention_oracle`].
pub fn global_attention_oracle_weights<T: Element>(
    x: &Tensor<T>,
    w: &AttentionWeights<T>,
    heads: usize,
    allowed: &[bool],
    pair_bias: Option<&Tensor<T>>,
) -> Result<Vec<f64>> {
    Ok(oracle(x, w, heads, allowed, pair_bias)?.1)
}

fn oracle<T: Element>(
    x: &Tensor<T>,
    w: &AttentionWeights<T>,
    heads: usize,
    allowed: &[bool],
    pair_bias: Option<&Tensor<T>>,
) -> Result<(Tensor<T>, Vec<f64>)> {
    let &[n, d] = x.shape() else {
        return Err(Error::Dimension(format!("oracle input must be [n, d], got {:?}", x.shape())));
    };
    if heads == 0 || d % heads != 0 || allowed.len() != n * n {
        return Err(Error::Config("oracle: inconsistent heads or mask size".into()));
    }
    if let Some(pb) = pair_bias {
        if pb.shape() != [heads, n, n] {
            return Err(Error::Dimension(format!("pair bias {:?} is not [{heads}, {n}, {n}]", pb.shape())));
        }
    }
    let dh = d / heads;
    let f = |t: &Tensor<T>| -> Vec<f64> { t.data().iter().map(|v| v.as_f64()).collect() };
    let xv = f(x);
    let lin = |wt: &Tensor<T>, bt: &Tensor<T>, input: &[f64]| -> Vec<f64> {
        let (wv, bv) = (f(wt), f(bt));
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for o in 0..d {
                let mut acc = bv[o];
                for k in 0..d {
                    acc += input[i * d + k] * wv[k * d + o];
                }
                out[i * d + o] = acc;
            }
        }
        out
    };
    let q = lin(&w.wq, &w.bq, &xv);
    let k = lin(&w.wk, &w.bk, &xv);
    let v = lin(&w.wv, &w.bv, &xv);
    let pb = pair_bias.map(f);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut mixed = vec![0.0; n * d];
    let mut probs = vec![0.0; heads * n * n];
    let mut logits = vec![0.0; n];
    for h in 0..heads {
        for i in 0..n {
            for j in 0..n {
                logits[j] = if allowed[i * n + j] {
                    let dot: f64 = (0..dh).map(|c| q[i * d + h * dh + c] * k[j * d + h * dh + c]).sum();
                    let bias = pb.as_ref().map_or(0.0, |pb| pb[(h * n + i) * n + j]);
                    (dot + bias) * scale
                } else {
                    f64::NEG_INFINITY
                };
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Config(format!("oracle: query {i} has no allowed source")));
            }
            let e: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
            let total: f64 = e.iter().sum();
            for (j, ej) in e.iter().enumerate() {
                let p = ej / total;
                probs[(h * n + i) * n + j] = p;
                if p == 0.0 {
                    continue;
                }
                for c in 0..dh {
                    mixed[i * d + h * dh + c] += p * v[j * d + h * dh + c];
                }
            }
        }
    }
    let out = lin(&w.wo, &w.bo, &mixed);
    Ok((Tensor::new(vec![n, d], out.into_iter().map(T::cast).collect())?, probs))
}

/// Dense `[heads, n, n]` bias for the oracle under regional attention:
/// the table entry addressed by the pair's pixel offset in dilation steps
/// (rounded down), zero for offsets outside the table.
pub fn regional_pair_bias<T: Element>(rel_bias: &Tensor<T>, height: usize, width: usize, config: &AttentionConfig) -> Tensor<T> {
    let (r, dil) = (config.region_size as isize, config.dilation as isize);
    let side = 2 * r - 1;
    pair_bias(rel_bias, height, width, |(yi, xi), (yj, xj)| {
        let by = (yj - yi).div_euclid(dil) + r - 1;
        let bx = (xj - xi).div_euclid(dil) + r - 1;
        ((0..side).contains(&by) && (0..side).contains(&bx)).then_some((by * side + bx) as usize)
    })
}

/// Dense `[heads, n, n]` bias for the oracle under (shifted) window attention.
pub fn window_pair_bias<T: Element>(rel_bias: &Tensor<T>, height: usize, width: usize, window: usize, shift: usize) -> Tensor<T> {
    let side = 2 * window as isize - 1;
    let (h, w, s) = (height as isize, width as isize, shift as isize);
    pair_bias(rel_bias, height, width, |(yi, xi), (yj, xj)| {
        let shifted = |c: isize, len: isize| (c - s).rem_euclid(len);
        let by = shifted(yj, h) - shifted(yi, h) + window as isize - 1;
        let bx = shifted(xj, w) - shifted(xi, w) + window as isize - 1;
        ((0..side).contains(&by) && (0..side).contains(&bx)).then_some((by * side + bx) as usize)
    })
}

fn pair_bias<T: Element>(
    rel_bias: &Tensor<T>,
    height: usize,
    width: usize,
    slot: impl Fn((isize, isize), (isize, isize)) -> Option<usize>,
) -> Tensor<T> {
    let heads = rel_bias.shape()[0];
    let table = rel_bias.len() / heads;
    let n = height * width;
    let coord = |i: usize| ((i / width) as isize, (i % width) as isize);
    let mut out = Tensor::zeros(&[heads, n, n]);
    let data = out.data_mut();
    for h in 0..heads {
        for i in 0..n {
            for j in 0..n {
                if let Some(t) = slot(coord(i), coord(j)) {
                    data[(h * n + i) * n + j] = rel_bias.data()[h * table + t];
                }
            }
        }
    }
    out
}

/// Post-softmax regional attention weights of one query.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub query: (usize, usize),
    /// Region sources in row-major region order.
    pub coords: Vec<(usize, usize)>,
    /// One weight vector per head, aligned with `coords`.
    pub head_weights: Vec<Vec<f64>>,
}

impl AttentionMap {
    /// Weights averaged over heads.
    pub fn mean_weights(&self) -> Vec<f64> {
        let heads = self.head_weights.len() as f64;
        (0..self.coords.len())
            .map(|j| self.head_weights.iter().map(|w| w[j]).sum::<f64>() / heads)
            .collect()
    }

    /// One `dy dx weight` line per region element (offsets relative to the
    /// query, head-averaged weight with 9 significant digits).
    pub fn to_text(&self) -> String {
        let (qy, qx) = self.query;
        let mut s = String::new();
        for (&(y, x), w) in self.coords.iter().zip(self.mean_weights()) {
            let dy = y as isize - qy as isize;
            let dx = x as isize - qx as isize;
            s.push_str(&format!("{dy} {dx} {}\n", significant(w, 9)));
        }
        s
    }
}

/// `v` in plain decimal notation with `digits` significant digits.
pub fn significant(v: f64, digits: usize) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{:.*}", digits - 1, v);
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (digits as i32 - 1 - magnitude).max(0) as usize;
    let s = format!("{v:.decimals$}");
    // rounding can carry into a new leading digit (9.99.. -> 10.0)
    let rounded: f64 = s.parse().unwrap_or(v);
    if rounded != 0.0 && rounded.abs().log10().floor() as i32 > magnitude && decimals > 0 {
        format!("{v:.*}", decimals - 1)
    } else {
        s
    }
}

/// Runs regional attention on `tape` and returns both the output and the
/// post-softmax weights `[N * heads * n, 1, r^2]`.
pub fn regional_attention_with_weights<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    params: &AttentionParams,
    config: &AttentionConfig,
    height: usize,
    width: usize,
) -> Result<(Var, Var)> {
    check_embed(tape, x, config)?;
    let map = regional_map(height, width, config)?;
    let a = attend(tape, x, params, &map, config.num_heads)?;
    Ok((a.out, a.weights))
}

/// Extracts the weights of `query` for batch item 0 from the weight tensor
/// returned by [`regional_attention_with_weights`].
pub fn extract_attention_map<T: Element>(
    weights: &Tensor<T>,
    config: &AttentionConfig,
    height: usize,
    width: usize,
    query: (usize, usize),
) -> Result<AttentionMap> {
    let coords = region_indices(query, height, width, config)?;
    let n = height * width;
    let s = coords.len();
    let qi = query.0 * width + query.1;
    let head_weights = (0..config.num_heads)
        .map(|h| {
            let row = (h * n + qi) * s;
            weights.data()[row..row + s].iter().map(|v| v.as_f64()).collect()
        })
        .collect();
    Ok(AttentionMap { query, coords, head_weights })
}

/// Regional attention weights of one query for tokens `x: [n, d]`.
pub fn attention_map_dump<T: Element>(
    x: &Tensor<T>,
    weights: &AttentionWeights<T>,
    config: &AttentionConfig,
    height: usize,
    width: usize,
    query: (usize, usize),
) -> Result<AttentionMap> {
    if query.0 >= height || query.1 >= width {
        return Err(Error::Index(format!(
            "query ({}, {}) outside a {height}x{width} map",
            query.0, query.1
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone().reshape(&[1, height * width, config.embed_dim])?);
    let p = weights.bind(&mut tape, false);
    let (_, w) = regional_attention_with_weights(&mut tape, xv, &p, config, height, width)?;
    extract_attention_map(tape.value(w), config, height, width, query)
}
