use rand::Rng;
use rasm_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::ShadowSample;
use crate::error::{Error, Result};

/// Augmentation probabilities and optional extensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub hflip: f64,
    pub vflip: f64,
    /// Probability of rotating by a uniformly chosen 90, 180 or 270 degrees.
    pub rotate: f64,
    /// Convex combination with a partner sample, `lambda ~ Beta(1, 1)`,
    /// union of the masks.
    pub mixup: bool,
    /// Hue shift in `[-0.05, 0.05]` and saturation scale in `[0.8, 1.2]`,
    /// shared by shadow and gt.
    pub hsv: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { hflip: 0.5, vflip: 0.5, rotate: 0.5, mixup: false, hsv: false }
    }
}

impl AugmentConfig {
    /// Every augmentation off.
    pub fn none() -> Self {
        Self { hflip: 0.0, vflip: 0.0, rotate: 0.0, mixup: false, hsv: false }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.hflip, self.vflip, self.rotate].iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("augment: probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn dims(t: &Tensor<f32>) -> (usize, usize, usize) {
    (t.shape()[0], t.shape()[1], t.shape()[2])
}

/// Rebuilds a `[C, oh, ow]` tensor where output `(y, x)` reads input
/// `src(y, x)`.
fn remap(t: &Tensor<f32>, oh: usize, ow: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Tensor<f32> {
    let (c, h, w) = dims(t);
    let d = t.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = src(y, x);
                out.push(d[(ch * h + sy) * w + sx]);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out).expect("remap preserves element count")
}

fn flip_h(t: &Tensor<f32>) -> Tensor<f32> {
    let (_, h, w) = dims(t);
    remap(t, h, w, |y, x| (y, w - 1 - x))
}

fn flip_v(t: &Tensor<f32>) -> Tensor<f32> {
    let (_, h, w) = dims(t);
    remap(t, h, w, |y, x| (h - 1 - y, x))
}

/// Counter-clockwise rotation by `quarter_turns * 90` degrees.
fn rotate(t: &Tensor<f32>, quarter_turns: usize) -> Tensor<f32> {
    let (_, h, w) = dims(t);
    match quarter_turns % 4 {
        0 => t.clone(),
        1 => remap(t, w, h, |y, x| (x, w - 1 - y)),
        2 => remap(t, h, w, |y, x| (h - 1 - y, w - 1 - x)),
        _ => remap(t, w, h, |y, x| (h - 1 - x, y)),
    }
}

fn map_triple(s: &ShadowSample, f: impl Fn(&Tensor<f32>) -> Tensor<f32>) -> ShadowSample {
    ShadowSample { name: s.name.clone(), shadow: f(&s.shadow), mask: f(&s.mask), gt: f(&s.gt) }
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn jitter_hsv(img: &Tensor<f32>, dh: f64, sat: f64) -> Tensor<f32> {
    let (_, h, w) = dims(img);
    let n = h * w;
    let d = img.data();
    let mut out = d.to_vec();
    for p in 0..n {
        let [hh, s, v] = rgb_to_hsv([0, 1, 2].map(|c| d[c * n + p] as f64));
        let rgb = hsv_to_rgb([hh + dh, (s * sat).clamp(0.0, 1.0), v]);
        for c in 0..3 {
            out[c * n + p] = rgb[c].clamp(0.0, 1.0) as f32;
        }
    }
    Tensor::new(img.shape().to_vec(), out).expect("same shape")
}

fn mix(a: &Tensor<f32>, b: &Tensor<f32>, lambda: f64) -> Tensor<f32> {
    a.zip_map(b, |x, y| (lambda * x as f64 + (1.0 - lambda) * y as f64) as f32).expect("shapes checked")
}

/// Random flips and quarter-turn rotations applied identically to shadow,
/// mask and gt, plus the optional MixUp (with `partner`) and HSV jitter.
///
/// The random stream consumption does not depend on which augmentations
/// fire, so a seeded sequence stays aligned across configurations.
pub fn augment<R: Rng + ?Sized>(
    sample: &ShadowSample,
    partner: Option<&ShadowSample>,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<ShadowSample> {
    let do_h = rng.random::<f64>() < config.hflip;
    let do_v = rng.random::<f64>() < config.vflip;
    let do_r = rng.random::<f64>() < config.rotate;
    let turns = rng.random_range(1..=3usize);

    let mut out = sample.clone();
    if config.mixup {
        if let Some(p) = partner {
            if p.mask.shape() != sample.mask.shape() {
                return Err(Error::Dimension(format!(
                    "mixup partner {} has shape {:?}, expected {:?}",
                    p.name,
                    p.mask.shape(),
                    sample.mask.shape()
                )));
            }
            let lambda = rng.random::<f64>();
            out.shadow = mix(&sample.shadow, &p.shadow, lambda);
            out.gt = mix(&sample.gt, &p.gt, lambda);
            out.mask = sample.mask.zip_map(&p.mask, f32::max)?;
        }
    }
    if config.hsv {
        let dh = rng.random_range(-0.05..=0.05);
        let sat = rng.random_range(0.8..=1.2);
        out.shadow = jitter_hsv(&out.shadow, dh, sat);
        out.gt = jitter_hsv(&out.gt, dh, sat);
    }
    if do_h {
        out = map_triple(&out, flip_h);
    }
    if do_v {
        out = map_triple(&out, flip_v);
    }
    if do_r {
        out = map_triple(&out, |t| rotate(t, turns));
    }
    Ok(out)
}

/// Cuts the same uniformly placed `height x width` window from the triple.
pub fn random_crop<R: Rng + ?Sized>(
    sample: &ShadowSample,
    height: usize,
    width: usize,
    rng: &mut R,
) -> Result<ShadowSample> {
    let (h, w) = (sample.height(), sample.width());
    if height == 0 || width == 0 || height > h || width > w {
        return Err(Error::Dimension(format!("cannot crop {height}x{width} from a {h}x{w} image")));
    }
    let top = rng.random_range(0..=h - height);
    let left = rng.random_range(0..=w - width);
    Ok(map_triple(sample, |t| remap(t, height, width, |y, x| (top + y, left + x))))
}
