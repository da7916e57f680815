//! Reference data shared by the integration suites.
#![allow(dead_code)]

use rasm_tensor::Tensor;

/// 64-bit linear congruential generator, top 31 bits per draw.
pub struct Lcg(u64);

impl Lcg {
    pub fn new(seed: u64) -> Self {
        Lcg(seed)
    }

    pub fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        self.0 >> 33
    }
}

/// 8-bit-valued image pair with correlated structure; the same construction
/// produced the frozen SSIM references below.
pub fn ssim_pair(seed: u64, h: usize, w: usize) -> (Tensor<f64>, Tensor<f64>) {
    let mut g = Lcg::new(seed);
    let mut a = vec![0.0; 3 * h * w];
    let mut b = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let ai = ((x * 7 + y * 3 + c * 50) as u64 + g.next() % 40) % 256;
                let bi = (ai as i64 + (g.next() % 61) as i64 - 30).clamp(0, 255);
                a[(c * h + y) * w + x] = ai as f64 / 255.0;
                b[(c * h + y) * w + x] = bi as f64 / 255.0;
            }
        }
    }
    (Tensor::new(vec![3, h, w], a).unwrap(), Tensor::new(vec![3, h, w], b).unwrap())
}

/// `(seed, height, width, ssim)`: scikit-image 0.25.2
/// `structural_similarity(a, b, gaussian_weights=True, sigma=1.5,
/// use_sample_covariance=False, data_range=1.0, channel_axis=0)` on
/// `ssim_pair(seed, height, width)`.
pub const SSIM_REFERENCE: [(u64, usize, usize, f64); 20] = [
    (1, 16, 16, 0.639241920298),
    (2, 23, 27, 0.740507806501),
    (3, 30, 38, 0.775304442932),
    (4, 37, 20, 0.744438346365),
    (5, 44, 31, 0.778562604763),
    (6, 18, 42, 0.757351040357),
    (7, 25, 24, 0.755371428326),
    (8, 32, 35, 0.765010306839),
    (9, 39, 17, 0.745319605804),
    (10, 46, 28, 0.778159125842),
    (11, 20, 39, 0.763331198942),
    (12, 27, 21, 0.720256903484),
    (13, 34, 32, 0.777182181462),
    (14, 41, 43, 0.756906163611),
    (15, 48, 25, 0.777312877218),
    (16, 22, 36, 0.761937340256),
    (17, 29, 18, 0.713199551916),
    (18, 36, 29, 0.781949151738),
    (19, 43, 40, 0.762241418074),
    (20, 17, 22, 0.679231855328),
];

/// `(rgb, lab)` from scikit-image 0.25.2 `rgb2lab` (D65, 2° observer).
pub const LAB_REFERENCE: [([f64; 3], [f64; 3]); 3] = [
    ([0.5, 0.5, 0.5], [53.3889647, -1.46849652e-03, 2.78358687e-03]),
    ([0.2, 0.6, 0.9], [60.92953203, -3.06015532, -46.83765364]),
    ([0.9, 0.3, 0.1], [54.08644181, 57.2277452, 58.18302421]),
];
