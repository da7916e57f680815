use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rasm_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::ShadowSample;
use crate::error::{Error, Result};

/// Procedural base-texture family for the shadow-free image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Gradient,
    Checker,
    Noise,
}

/// Parameters of the synthetic shadow generator. Ranges are inclusive
/// `[lo, hi]` pairs sampled uniformly per image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub textures: Vec<Texture>,
    /// Shadow polygon vertex count range.
    pub vertices: [usize; 2],
    /// Per-channel multiplicative gain inside the shadow.
    pub gain: [f64; 2],
    /// Ambient offset subtracted inside the shadow.
    pub ambient: [f64; 2],
    /// Width of the soft shadow boundary in pixels (0 = hard edge).
    pub penumbra: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 64,
            width: 64,
            textures: vec![Texture::Gradient, Texture::Checker, Texture::Noise],
            vertices: [3, 8],
            gain: [0.2, 0.7],
            ambient: [0.0, 0.05],
            penumbra: 3.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.height < 8 || self.width < 8 {
            return bad("images must be at least 8x8");
        }
        if self.textures.is_empty() {
            return bad("at least one texture family is required");
        }
        if self.vertices[0] < 3 || self.vertices[0] > self.vertices[1] {
            return bad("vertex range must satisfy 3 <= lo <= hi");
        }
        // gain 1 is the degenerate "no shadow" case and is allowed
        if !(0.0 <= self.gain[0] && self.gain[0] <= self.gain[1] && self.gain[1] <= 1.0) {
            return bad("gain range must satisfy 0 <= lo <= hi <= 1");
        }
        if !(0.0 <= self.ambient[0] && self.ambient[0] <= self.ambient[1] && self.ambient[1] <= 1.0) {
            return bad("ambient range must satisfy 0 <= lo <= hi <= 1");
        }
        if !(self.penumbra >= 0.0 && self.penumbra.is_finite()) {
            return bad("penumbra must be finite and nonnegative");
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..=range[1])
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [0; 3].map(|_| rng.random_range(0.15..0.95))
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Shadow-free image as `[3][H * W]` planes.
fn texture(kind: Texture, h: usize, w: usize, rng: &mut ChaCha8Rng) -> [Vec<f64>; 3] {
    let mut out = [vec![0.0; h * w], vec![0.0; h * w], vec![0.0; h * w]];
    let mut put = |y: usize, x: usize, c: [f64; 3]| {
        for k in 0..3 {
            out[k][y * w + x] = c[k];
        }
    };
    let lerp = |a: [f64; 3], b: [f64; 3], t: f64| [0, 1, 2].map(|k| a[k] + (b[k] - a[k]) * t);
    match kind {
        Texture::Gradient => {
            let (c0, c1) = (random_color(rng), random_color(rng));
            let theta = rng.random_range(0.0..2.0 * PI);
            let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
            let radius = 0.5 * ((h * h + w * w) as f64).sqrt();
            for y in 0..h {
                for x in 0..w {
                    let proj = (x as f64 + 0.5 - cx) * theta.cos() + (y as f64 + 0.5 - cy) * theta.sin();
                    put(y, x, lerp(c0, c1, 0.5 + 0.5 * proj / radius));
                }
            }
        }
        Texture::Checker => {
            let (c0, c1) = (random_color(rng), random_color(rng));
            let cell = rng.random_range(4..=16usize);
            let (oy, ox) = (rng.random_range(0..cell), rng.random_range(0..cell));
            for y in 0..h {
                for x in 0..w {
                    let odd = ((y + oy) / cell + (x + ox) / cell) % 2 == 1;
                    put(y, x, if odd { c1 } else { c0 });
                }
            }
        }
        Texture::Noise => {
            let step = rng.random_range(8..=24usize);
            let (gh, gw) = (h / step + 2, w / step + 2);
            let grid: Vec<[f64; 3]> = (0..gh * gw).map(|_| random_color(rng)).collect();
            for y in 0..h {
                for x in 0..w {
                    let (fy, fx) = (y as f64 / step as f64, x as f64 / step as f64);
                    let (iy, ix) = (fy as usize, fx as usize);
                    let (ty, tx) = (smoothstep(fy - iy as f64), smoothstep(fx - ix as f64));
                    let top = lerp(grid[iy * gw + ix], grid[iy * gw + ix + 1], tx);
                    let bottom = lerp(grid[(iy + 1) * gw + ix], grid[(iy + 1) * gw + ix + 1], tx);
                    put(y, x, lerp(top, bottom, ty));
                }
            }
        }
    }
    out
}

/// Random star-shaped polygon rasterized at pixel centres (even-odd rule).
fn polygon_matte(h: usize, w: usize, vertices: [usize; 2], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let k = rng.random_range(vertices[0]..=vertices[1]);
    let side = h.min(w) as f64;
    let cy = rng.random_range(0.25..0.75) * h as f64;
    let cx = rng.random_range(0.25..0.75) * w as f64;
    let mut angles: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    angles.sort_by(f64::total_cmp);
    let pts: Vec<(f64, f64)> = angles
        .iter()
        .map(|a| {
            let r = rng.random_range(0.15..0.45) * side;
            (cy + r * a.sin(), cx + r * a.cos())
        })
        .collect();
    let mut m = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut inside = false;
            for i in 0..k {
                let (ay, ax) = pts[i];
                let (by, bx) = pts[(i + 1) % k];
                if (ay > py) != (by > py) && px < ax + (py - ay) * (bx - ax) / (by - ay) {
                    inside = !inside;
                }
            }
            m[y * w + x] = inside as u8 as f64;
        }
    }
    m
}

/// Separable Gaussian blur with sigma = penumbra / 2, edges clamped.
fn soften(m: &[f64], h: usize, w: usize, penumbra: f64) -> Vec<f64> {
    if penumbra == 0.0 {
        return m.to_vec();
    }
    let sigma = penumbra / 2.0;
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let pass = |src: &[f64], along_x: bool| {
        let mut out = vec![0.0; h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let d = i as isize - radius;
                    let (yy, xx) = if along_x {
                        (y, (x + d).clamp(0, w as isize - 1))
                    } else {
                        ((y + d).clamp(0, h as isize - 1), x)
                    };
                    acc += kv * src[yy as usize * w + xx as usize];
                }
                out[y as usize * w + x as usize] = acc;
            }
        }
        out
    };
    pass(&pass(m, true), false)
}

/// Rec. 709 luma of an sRGB triple.
pub fn luminance(rgb: [f64; 3]) -> f64 {
    0.2126 * rgb[0] + 0.7152 * rgb[1] + 0.0722 * rgb[2]
}

/// Sample `index` of the generator; a pure function of `(config, index)`.
///
/// Polygons whose thresholded mask would be empty or cover the whole image
/// are redrawn.
pub fn generate_sample(config: &SynthConfig, index: u64) -> Result<ShadowSample> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index);
    let (h, w) = (config.height, config.width);
    let n = h * w;

    let kind = config.textures[rng.random_range(0..config.textures.len())];
    let gt = texture(kind, h, w, &mut rng);
    let mut attempts = 0;
    let (matte, mask) = loop {
        attempts += 1;
        if attempts > 1000 {
            return Err(Error::Config(format!("synth: no usable shadow polygon for sample {index}")));
        }
        let hard = polygon_matte(h, w, config.vertices, &mut rng);
        let matte = soften(&hard, h, w, config.penumbra);
        let mask: Vec<f64> = matte.iter().map(|&m| (m > 0.5) as u8 as f64).collect();
        let covered = mask.iter().filter(|&&m| m == 1.0).count();
        if covered > 0 && covered < n {
            break (matte, mask);
        }
    };
    let gain = [0; 3].map(|_| uniform(&mut rng, config.gain));
    let ambient = uniform(&mut rng, config.ambient);

    let mut gt_data = vec![0.0f32; 3 * n];
    let mut shadow = vec![0.0f32; 3 * n];
    for c in 0..3 {
        for p in 0..n {
            let g = gt[c][p] as f32;
            let m = matte[p];
            let v = g as f64 * (gain[c] + (1.0 - gain[c]) * (1.0 - m)) - ambient * m;
            gt_data[c * n + p] = g;
            shadow[c * n + p] = v.clamp(0.0, 1.0) as f32;
        }
    }
    Ok(ShadowSample {
        name: format!("synth_{:06}", index),
        shadow: Tensor::new(vec![3, h, w], shadow)?,
        mask: Tensor::new(vec![1, h, w], mask.into_iter().map(|m| m as f32).collect())?,
        gt: Tensor::new(vec![3, h, w], gt_data)?,
    })
}
