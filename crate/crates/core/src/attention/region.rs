//! Source selection for the local attention operators.
//!
//! A [`SourceMap`] lists, for every query on an `H' x W'` grid, the flat
//! indices of the positions it attends to and the relative-position-bias
//! table entry used for each pair.

use crate::attention::AttentionConfig;
use crate::error::{Error, Result};

/// Per-query sources and bias-table slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceMap {
    pub height: usize,
    pub width: usize,
    /// Sources per query.
    pub sources_per_query: usize,
    /// Side of the square bias table (`2t - 1` for a `t x t` neighbourhood).
    pub table_side: usize,
    /// `n * sources_per_query` flat source indices (`y * width + x`).
    pub sources: Vec<usize>,
    /// `n * sources_per_query` indices into the flattened bias table.
    pub bias_slots: Vec<usize>,
}

impl SourceMap {
    pub fn queries(&self) -> usize {
        self.height * self.width
    }

    pub fn sources_of(&self, query: usize) -> &[usize] {
        let s = self.sources_per_query;
        &self.sources[query * s..(query + 1) * s]
    }

    /// Dense `n x n` mask of allowed (query, source) pairs.
    pub fn mask(&self) -> Vec<bool> {
        let n = self.queries();
        let mut mask = vec![false; n * n];
        for q in 0..n {
            for &s in self.sources_of(q) {
                mask[q * n + s] = true;
            }
        }
        mask
    }
}

/// Start of the dilated lattice covering `i` on an axis of length `len`,
/// after translating it inside the axis.
fn lattice_start(i: usize, len: usize, region: usize, dilation: usize) -> usize {
    let half = (region - 1) / 2;
    let span = dilation * (region - 1) + 1;
    let centered = i as isize - (dilation * half) as isize;
    centered.clamp(0, (len - span) as isize) as usize
}

/// Bias-table coordinate (along one axis) of lattice element `k` for a query
/// at `i`: the pixel offset measured in dilation steps, rounded down.
fn bias_coord(i: usize, start: usize, k: usize, region: usize, dilation: usize) -> usize {
    let offset = (start + k * dilation) as isize - i as isize;
    (offset.div_euclid(dilation as isize) + region as isize - 1) as usize
}

/// The `r x r` dilated region of query `(y, x)` in row-major region order.
pub fn region_indices(query: (usize, usize), height: usize, width: usize, config: &AttentionConfig) -> Result<Vec<(usize, usize)>> {
    config.check_fits(height, width)?;
    let (y, x) = query;
    if y >= height || x >= width {
        return Err(Error::Index(format!("query ({y}, {x}) outside a {height}x{width} map")));
    }
    let (r, d) = (config.region_size, config.dilation);
    let (sy, sx) = (lattice_start(y, height, r, d), lattice_start(x, width, r, d));
    let mut out = Vec::with_capacity(r * r);
    for i in 0..r {
        for j in 0..r {
            out.push((sy + i * d, sx + j * d));
        }
    }
    Ok(out)
}

/// Source map of dilated regional attention over an `height x width` grid.
pub fn regional_map(height: usize, width: usize, config: &AttentionConfig) -> Result<SourceMap> {
    config.check_fits(height, width)?;
    let (r, d) = (config.region_size, config.dilation);
    let side = 2 * r - 1;
    let n = height * width;
    let mut sources = Vec::with_capacity(n * r * r);
    let mut bias_slots = Vec::with_capacity(n * r * r);
    for y in 0..height {
        let sy = lattice_start(y, height, r, d);
        for x in 0..width {
            let sx = lattice_start(x, width, r, d);
            for i in 0..r {
                let by = bias_coord(y, sy, i, r, d);
                for j in 0..r {
                    sources.push((sy + i * d) * width + sx + j * d);
                    bias_slots.push(by * side + bias_coord(x, sx, j, r, d));
                }
            }
        }
    }
    Ok(SourceMap { height, width, sources_per_query: r * r, table_side: side, sources, bias_slots })
}

/// Source map of non-overlapping `window x window` attention, optionally on
/// a grid cyclically shifted by `shift` in both axes.
pub fn window_map(height: usize, width: usize, window: usize, shift: usize) -> Result<SourceMap> {
    if window == 0 || height % window != 0 || width % window != 0 {
        return Err(Error::Config(format!(
            "window size {window} does not tile a {height}x{width} feature map"
        )));
    }
    if shift >= window {
        return Err(Error::Config(format!("shift {shift} must be smaller than the window {window}")));
    }
    let side = 2 * window - 1;
    let n = height * width;
    let s = window * window;
    let mut sources = Vec::with_capacity(n * s);
    let mut bias_slots = Vec::with_capacity(n * s);
    for y in 0..height {
        // position in the shifted frame
        let ys = (y + height - shift) % height;
        let wy = ys / window * window;
        for x in 0..width {
            let xs = (x + width - shift) % width;
            let wx = xs / window * window;
            for i in 0..window {
                let my = wy + i;
                let by = my + window - 1 - ys;
                for j in 0..window {
                    let mx = wx + j;
                    let bx = mx + window - 1 - xs;
                    sources.push(((my + shift) % height) * width + (mx + shift) % width);
                    bias_slots.push(by * side + bx);
                }
            }
        }
    }
    Ok(SourceMap { height, width, sources_per_query: s, table_side: side, sources, bias_slots })
}
