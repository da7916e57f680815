//! Training objective: Charbonnier content loss plus a weighted L1 distance
//! between multi-scale features of a frozen extractor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rasm_tensor::{Element, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha_per: f64,
    pub alpha_cont: f64,
    pub layer_weights: [f64; 5],
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha_per: 0.001, alpha_cont: 1.0, layer_weights: [0.1, 0.1, 1.0, 1.0, 1.0], epsilon: 1e-6 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha_per, self.alpha_cont].into_iter().chain(self.layer_weights);
        if all.into_iter().any(|w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("charbonnier epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// `mean(sqrt((pred - target)^2 + eps))`.
pub fn charbonnier<T: Element>(tape: &mut Tape<T>, pred: Var, target: Var, eps: f64) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::Dimension(format!(
            "prediction {:?} and target {:?} differ in shape",
            tape.shape(pred),
            tape.shape(target)
        )));
    }
    let d = tape.sub(pred, target)?;
    let sq = tape.square(d);
    let shifted = tape.add_scalar(sq, eps);
    let root = tape.sqrt(shifted);
    Ok(tape.mean(root))
}

/// Channel widths of the five feature stages.
pub const STAGE_CHANNELS: [usize; 5] = [64, 128, 256, 512, 512];

/// Five stages of `[2x2 average pool] -> 3x3 conv -> ReLU`; stage `k` (from 1)
/// sees the input at `1 / 2^(k-1)` resolution. Weights are never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor<T = f32> {
    /// `(weight [cout, cin, 3, 3], bias [cout])` per stage.
    pub stages: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Element> FeatureExtractor<T> {
    /// He-initialized extractor with the standard stage widths.
    pub fn seeded(seed: u64) -> Self {
        Self::seeded_with(STAGE_CHANNELS, seed)
    }

    /// He-initialized extractor with custom stage widths.
    pub fn seeded_with(channels: [usize; 5], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let stages = channels
            .iter()
            .map(|&cout| {
                let std = (2.0 / (cin * 9) as f64).sqrt();
                let w = Tensor::randn(&[cout, cin, 3, 3], std, &mut rng);
                cin = cout;
                (w, Tensor::zeros(&[cout]))
            })
            .collect();
        Self { stages }
    }

    /// Builds an extractor from externally supplied stage weights.
    pub fn from_stages(stages: Vec<(Tensor<T>, Tensor<T>)>) -> Result<Self> {
        if stages.len() != 5 {
            return Err(Error::Config(format!("feature extractor needs 5 stages, got {}", stages.len())));
        }
        let mut cin = 3;
        for (k, (w, b)) in stages.iter().enumerate() {
            let s = w.shape();
            if s.len() != 4 || s[1] != cin || s[2] != 3 || s[3] != 3 || b.shape() != [s[0]] {
                return Err(Error::Config(format!("feature stage {k} has weight {s:?} and bias {:?}", b.shape())));
            }
            cin = s[0];
        }
        Ok(Self { stages })
    }

    pub fn cast<U: Element>(&self) -> FeatureExtractor<U> {
        FeatureExtractor { stages: self.stages.iter().map(|(w, b)| (w.cast(), b.cast())).collect() }
    }

    /// Features of the first `needed` stages for an NCHW batch.
    pub fn features(&self, tape: &mut Tape<T>, x: Var, needed: usize) -> Result<Vec<Var>> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Dimension(format!("feature extractor expects [N, 3, H, W], got {s:?}")));
        }
        if s[2] < 32 || s[3] < 32 || s[2] % 16 != 0 || s[3] % 16 != 0 {
            return Err(Error::Dimension(format!(
                "perceptual features need sides of at least 32 that are multiples of 16, got {}x{}",
                s[2], s[3]
            )));
        }
        let mut out = Vec::with_capacity(needed);
        let mut h = x;
        for (k, (w, b)) in self.stages.iter().take(needed).enumerate() {
            if k > 0 {
                h = tape.avg_pool(h, 2)?;
            }
            let wv = tape.constant(w.clone());
            let bv = tape.constant(b.clone());
            h = tape.conv2d(h, wv, Some(bv), 1, 1)?;
            h = tape.relu(h);
            out.push(h);
        }
        Ok(out)
    }
}

/// `sum_k w_k * mean|phi_k(pred) - phi_k(target)|`.
pub fn perceptual<T: Element>(
    tape: &mut Tape<T>,
    pred: Var,
    target: Var,
    extractor: &FeatureExtractor<T>,
    layer_weights: &[f64; 5],
) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::Dimension(format!(
            "prediction {:?} and target {:?} differ in shape",
            tape.shape(pred),
            tape.shape(target)
        )));
    }
    let needed = layer_weights.iter().rposition(|&w| w != 0.0).map_or(0, |i| i + 1);
    if needed == 0 {
        // still validate the input size
        extractor.features(tape, pred, 0)?;
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let fp = extractor.features(tape, pred, needed)?;
    let ft = extractor.features(tape, target, needed)?;
    let mut total: Option<Var> = None;
    for k in 0..needed {
        if layer_weights[k] == 0.0 {
            continue;
        }
        let d = tape.sub(fp[k], ft[k])?;
        let a = tape.abs(d);
        let m = tape.mean(a);
        let term = tape.scale(m, layer_weights[k]);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one nonzero layer weight"))
}

/// `alpha_per * perceptual + alpha_cont * charbonnier`.
pub fn total_loss<T: Element>(
    tape: &mut Tape<T>,
    pred: Var,
    target: Var,
    weights: &LossWeights,
    extractor: &FeatureExtractor<T>,
) -> Result<Var> {
    let cont = charbonnier(tape, pred, target, weights.epsilon)?;
    let cont = tape.scale(cont, weights.alpha_cont);
    if weights.alpha_per == 0.0 {
        return Ok(cont);
    }
    let per = perceptual(tape, pred, target, extractor, &weights.layer_weights)?;
    let per = tape.scale(per, weights.alpha_per);
    Ok(tape.add(per, cont)?)
}
