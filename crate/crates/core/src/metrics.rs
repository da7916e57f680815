//! Image-quality metrics in 64-bit: PSNR and SSIM in RGB, RMSE and MAE in
//! CIELAB, each over the whole image or a masked region.

use std::fmt::Write as _;
use std::sync::LazyLock;

use rasm_tensor::{Element, Tensor};

use crate::error::{Error, Result};

/// D65 reference white in XYZ.
pub const D65_WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

/// Exact inverse of [`RGB_TO_XYZ`], so conversions round-trip to rounding.
static XYZ_TO_RGB: LazyLock<[[f64; 3]; 3]> = LazyLock::new(|| invert3(&RGB_TO_XYZ));

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let c = |r: usize, k: usize| {
        let (r1, r2, k1, k2) = ((r + 1) % 3, (r + 2) % 3, (k + 1) % 3, (k + 2) % 3);
        m[r1][k1] * m[r2][k2] - m[r1][k2] * m[r2][k1]
    };
    let det: f64 = (0..3).map(|k| m[0][k] * c(0, k)).sum();
    [0, 1, 2].map(|i| [0, 1, 2].map(|j| c(j, i) / det))
}

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
/// PSNR reported when the mean squared error is below `1e-10`.
pub const PSNR_CAP: f64 = 100.0;

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|r| m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2])
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        c * 12.92
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

const DELTA: f64 = 6.0 / 29.0;

fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

/// One sRGB triple (clipped to `[0, 1]`) to `L*a*b*`.
pub fn srgb_pixel_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(|c| srgb_to_linear(c.clamp(0.0, 1.0)));
    let xyz = mat_vec(&RGB_TO_XYZ, lin);
    let [fx, fy, fz] = [0, 1, 2].map(|i| lab_f(xyz[i] / D65_WHITE[i]));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Inverse of [`srgb_pixel_to_lab`] (no gamut clipping).
pub fn lab_pixel_to_srgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let f = [fy + lab[1] / 500.0, fy, fy - lab[2] / 200.0];
    let xyz = [0, 1, 2].map(|i| lab_f_inv(f[i]) * D65_WHITE[i]);
    mat_vec(&XYZ_TO_RGB, xyz).map(linear_to_srgb)
}

fn check_image<T: Element>(img: &Tensor<T>) -> Result<(usize, usize)> {
    match *img.shape() {
        [3, h, w] => Ok((h, w)),
        ref s => Err(Error::Dimension(format!("expected a [3, H, W] image, got {s:?}"))),
    }
}

fn check_pair<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize)> {
    let hw = check_image(a)?;
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("images {:?} and {:?} differ in shape", a.shape(), b.shape())));
    }
    Ok(hw)
}

/// `[3, H, W]` sRGB image to `[3, H, W]` `L*a*b*`.
pub fn srgb_to_lab<T: Element>(img: &Tensor<T>) -> Result<Tensor<f64>> {
    let (h, w) = check_image(img)?;
    let n = h * w;
    let d = img.data();
    let mut out = vec![0.0; 3 * n];
    for p in 0..n {
        let lab = srgb_pixel_to_lab([d[p].as_f64(), d[n + p].as_f64(), d[2 * n + p].as_f64()]);
        for c in 0..3 {
            out[c * n + p] = lab[c];
        }
    }
    Ok(Tensor::new(vec![3, h, w], out)?)
}

/// `[3, H, W]` `L*a*b*` back to sRGB.
pub fn lab_to_srgb(lab: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (h, w) = check_image(lab)?;
    let n = h * w;
    let d = lab.data();
    let mut out = vec![0.0; 3 * n];
    for p in 0..n {
        let rgb = lab_pixel_to_srgb([d[p], d[n + p], d[2 * n + p]]);
        for c in 0..3 {
            out[c * n + p] = rgb[c];
        }
    }
    Ok(Tensor::new(vec![3, h, w], out)?)
}

/// Pixel subset a metric is computed over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Shadow,
    NonShadow,
    All,
}

/// Per-pixel selection (`H * W` flags) from a binary mask; pixels with mask
/// value above 0.5 are shadow.
pub fn region_selection<T: Element>(mask: &Tensor<T>, region: Region) -> Vec<bool> {
    mask.data()
        .iter()
        .map(|v| match region {
            Region::Shadow => v.as_f64() > 0.5,
            Region::NonShadow => v.as_f64() <= 0.5,
            Region::All => true,
        })
        .collect()
}

fn check_selection(sel: Option<&[bool]>, n: usize) -> Result<usize> {
    match sel {
        None => Ok(n),
        Some(s) if s.len() != n => Err(Error::Dimension(format!("mask has {} pixels, image has {n}", s.len()))),
        Some(s) => match s.iter().filter(|&&b| b).count() {
            0 => Err(Error::Evaluation("mask selects no pixels".into())),
            k => Ok(k),
        },
    }
}

/// Applies `f(a, b)` over selected pixels of all channels and returns the
/// mean.
fn masked_mean(a: &[f64], b: &[f64], n: usize, sel: Option<&[bool]>, f: impl Fn(f64, f64) -> f64) -> Result<f64> {
    let count = check_selection(sel, n)?;
    let channels = a.len() / n;
    let mut total = 0.0;
    for c in 0..channels {
        for p in 0..n {
            if sel.is_none_or(|s| s[p]) {
                total += f(a[c * n + p], b[c * n + p]);
            }
        }
    }
    Ok(total / (count * channels) as f64)
}

fn clipped<T: Element>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64().clamp(0.0, 1.0)).collect()
}

/// Mean squared error in RGB over the selected pixels (inputs clipped).
pub fn mse<T: Element>(a: &Tensor<T>, b: &Tensor<T>, sel: Option<&[bool]>) -> Result<f64> {
    let (h, w) = check_pair(a, b)?;
    masked_mean(&clipped(a), &clipped(b), h * w, sel, |x, y| (x - y) * (x - y))
}

/// `10 log10(1 / MSE)`, capped at 100 dB.
pub fn psnr<T: Element>(a: &Tensor<T>, b: &Tensor<T>, sel: Option<&[bool]>) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b, sel)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Root of the mean squared `L*a*b*` difference over selected pixels and
/// the three channels.
pub fn rmse_lab<T: Element>(a: &Tensor<T>, b: &Tensor<T>, sel: Option<&[bool]>) -> Result<f64> {
    let (h, w) = check_pair(a, b)?;
    let (la, lb) = (srgb_to_lab(a)?, srgb_to_lab(b)?);
    Ok(masked_mean(la.data(), lb.data(), h * w, sel, |x, y| (x - y) * (x - y))?.sqrt())
}

/// Mean absolute `L*a*b*` difference over selected pixels and channels.
pub fn mae_lab<T: Element>(a: &Tensor<T>, b: &Tensor<T>, sel: Option<&[bool]>) -> Result<f64> {
    let (h, w) = check_pair(a, b)?;
    let (la, lb) = (srgb_to_lab(a)?, srgb_to_lab(b)?);
    masked_mean(la.data(), lb.data(), h * w, sel, |x, y| (x - y).abs())
}

fn gaussian_kernel() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut k = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Gaussian-weighted means over every fully contained 11x11 window
/// (separable filtering), `(H - 10) x (W - 10)` outputs.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let kw = k.len();
    let (oh, ow) = (h + 1 - kw, w + 1 - kw);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = (0..kw).map(|j| k[j] * x[y * w + ox + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..kw).map(|i| k[i] * rows[(oy + i) * ow + ox]).sum();
        }
    }
    out
}

/// SSIM map of one channel over valid windows, indexed by window top-left.
fn ssim_map(x: &[f64], y: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let c1 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
    let c2 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = filter_valid(x, h, w, &k);
    let my = filter_valid(y, h, w, &k);
    let mxx = filter_valid(&prod(x, x), h, w, &k);
    let myy = filter_valid(&prod(y, y), h, w, &k);
    let mxy = filter_valid(&prod(x, y), h, w, &k);
    (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .collect()
}

/// Mean SSIM over channels with an 11x11 Gaussian window (sigma 1.5), data
/// range 1. With a selection, only windows whose centre pixel is selected
/// are averaged.
pub fn ssim<T: Element>(a: &Tensor<T>, b: &Tensor<T>, sel: Option<&[bool]>) -> Result<f64> {
    let (h, w) = check_pair(a, b)?;
    let win = 2 * SSIM_RADIUS + 1;
    if h < win || w < win {
        return Err(Error::Evaluation(format!("SSIM needs at least {win}x{win} pixels, got {h}x{w}")));
    }
    check_selection(sel, h * w)?;
    let (ow, oh) = (w + 1 - win, h + 1 - win);
    let centres: Vec<usize> = (0..oh * ow)
        .filter(|i| sel.is_none_or(|s| s[(i / ow + SSIM_RADIUS) * w + i % ow + SSIM_RADIUS]))
        .collect();
    if centres.is_empty() {
        return Err(Error::Evaluation("mask selects no SSIM window centre".into()));
    }
    let (xa, xb) = (clipped(a), clipped(b));
    let n = h * w;
    let mut total = 0.0;
    for c in 0..3 {
        let map = ssim_map(&xa[c * n..(c + 1) * n], &xb[c * n..(c + 1) * n], h, w);
        total += centres.iter().map(|&i| map[i]).sum::<f64>() / centres.len() as f64;
    }
    Ok(total / 3.0)
}

/// Per-image metrics for the shadow (S), non-shadow (NS) and whole (ALL)
/// regions, in that order.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub name: String,
    pub psnr: [f64; 3],
    pub ssim: [f64; 3],
    pub rmse_lab: [f64; 3],
    pub mae_lab: [f64; 3],
}

const REGIONS: [Region; 3] = [Region::Shadow, Region::NonShadow, Region::All];

/// Computes every metric of `pred` against `gt` for the three regions of
/// `mask` (`[1, H, W]`).
pub fn evaluate_pair<T: Element>(name: &str, pred: &Tensor<T>, gt: &Tensor<T>, mask: &Tensor<T>) -> Result<EvalRecord> {
    let (h, w) = check_pair(pred, gt)?;
    if mask.len() != h * w {
        return Err(Error::Dimension(format!("mask {:?} does not match a {h}x{w} image", mask.shape())));
    }
    let mut r = EvalRecord { name: name.to_string(), psnr: [0.0; 3], ssim: [0.0; 3], rmse_lab: [0.0; 3], mae_lab: [0.0; 3] };
    for (i, region) in REGIONS.into_iter().enumerate() {
        let sel = region_selection(mask, region);
        let sel = (region != Region::All).then_some(sel.as_slice());
        r.psnr[i] = psnr(pred, gt, sel)?;
        r.ssim[i] = ssim(pred, gt, sel)?;
        r.rmse_lab[i] = rmse_lab(pred, gt, sel)?;
        r.mae_lab[i] = mae_lab(pred, gt, sel)?;
    }
    Ok(r)
}

pub const CSV_HEADER: &str = "name,psnr_s,psnr_ns,psnr_all,ssim_s,ssim_ns,ssim_all,rmse_lab_s,rmse_lab_ns,rmse_lab_all,mae_lab_s,mae_lab_ns,mae_lab_all";

impl EvalRecord {
    pub fn csv_row(&self) -> String {
        let mut s = self.name.clone();
        for v in self.psnr.iter().chain(&self.ssim).chain(&self.rmse_lab).chain(&self.mae_lab) {
            let _ = write!(s, ",{v:.6}");
        }
        s
    }

    /// Field-wise mean of `records`, named `mean`.
    pub fn mean(records: &[EvalRecord]) -> Option<EvalRecord> {
        if records.is_empty() {
            return None;
        }
        let k = records.len() as f64;
        let avg = |f: fn(&EvalRecord) -> [f64; 3]| {
            [0, 1, 2].map(|i| records.iter().map(|r| f(r)[i]).sum::<f64>() / k)
        };
        Some(EvalRecord {
            name: "mean".into(),
            psnr: avg(|r| r.psnr),
            ssim: avg(|r| r.ssim),
            rmse_lab: avg(|r| r.rmse_lab),
            mae_lab: avg(|r| r.mae_lab),
        })
    }
}

/// Header, one row per record, then the aggregate `mean` row.
pub fn records_to_csv(records: &[EvalRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records.iter().chain(EvalRecord::mean(records).as_ref()) {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}
