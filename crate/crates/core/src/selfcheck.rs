//! Fast built-in verification: oracle equivalence, finite-difference
//! gradient checks, metric identities and checkpoint round trips.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rasm_tensor::gradcheck::{gradcheck, gradcheck_at, LossFn};
use rasm_tensor::{Element, Tape, Tensor, TensorError, Var};

use crate::attention::{
    global_attention_oracle, regional_attention, regional_map, regional_pair_bias, AttentionConfig, AttentionParams,
    AttentionWeights,
};
use crate::error::Result;
use crate::metrics::{psnr, srgb_pixel_to_lab, ssim};
use crate::network::{rasm_forward, BottleneckAttention, Bound, ModelConfig, ParameterSet};
use crate::train::{init_checkpoint, Checkpoint, RunConfig};

/// Outcome of one suite.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

const GRAD_TOL: f64 = 1e-6;
const ORACLE_TOL: f64 = 1e-5;

fn regional_out(x: &Tensor<f64>, w: &AttentionWeights<f64>, c: &AttentionConfig, h: usize, wd: usize) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone().reshape(&[1, h * wd, c.embed_dim])?);
    let p = w.bind(&mut tape, false);
    let y = regional_attention(&mut tape, xv, &p, c, h, wd)?;
    Ok(tape.value(y).clone().reshape(&[h * wd, c.embed_dim])?)
}

fn oracle_equivalence() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    let mut cases = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for r in [1, 3, 5] {
        for dilation in [1, 2] {
            for heads in [1, 2] {
                for _ in 0..3 {
                    let span = (r - 1) * dilation + 1;
                    let (h, w) = (rng.random_range(span..=span + 4), rng.random_range(span..=span + 4));
                    let c = AttentionConfig { region_size: r, dilation, num_heads: heads, embed_dim: 4 };
                    let weights = AttentionWeights::<f64>::random(4, heads, c.table_side(), 0.5, &mut rng);
                    let x = Tensor::<f64>::uniform(&[h * w, 4], -1.0, 1.0, &mut rng);
                    let mask = regional_map(h, w, &c)?.mask();
                    let bias = regional_pair_bias(&weights.rel_bias, h, w, &c);
                    let expected = global_attention_oracle(&x, &weights, heads, &mask, Some(&bias))?;
                    worst = worst.max(regional_out(&x, &weights, &c, h, w)?.max_abs_diff(&expected)?);
                    cases += 1;
                }
            }
        }
    }
    Ok((worst < ORACLE_TOL, format!("{cases} configurations, max abs diff {worst:.2e}")))
}

fn full_reduction() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for side in [3, 5] {
        let c = AttentionConfig { region_size: side, dilation: 1, num_heads: 2, embed_dim: 4 };
        let weights = AttentionWeights::<f64>::random(4, 2, c.table_side(), 0.5, &mut rng);
        let x = Tensor::<f64>::uniform(&[side * side, 4], -1.0, 1.0, &mut rng);
        let n = side * side;
        let bias = regional_pair_bias(&weights.rel_bias, side, side, &c);
        let expected = global_attention_oracle(&x, &weights, 2, &vec![true; n * n], Some(&bias))?;
        worst = worst.max(regional_out(&x, &weights, &c, side, side)?.max_abs_diff(&expected)?);
    }
    Ok((worst < ORACLE_TOL, format!("max abs diff {worst:.2e}")))
}

fn op_gradients() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut u = |shape: &[usize]| Tensor::<f64>::uniform(shape, -1.0, 1.0, &mut rng);
    let weights = Tensor::from_fn(&[2, 3, 5, 5], |i| ((i as f64) * 0.37).sin());
    let composite = gradcheck(&[u(&[2, 3, 4, 4]), u(&[3, 3, 3, 3]), u(&[3]), u(&[3]), u(&[3])], 1e-5, |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
        let y = t.layer_norm(y, v[3], v[4], 1)?;
        let y = t.gelu(y);
        let p = t.avg_pool(y, 2)?;
        let p = t.conv_transpose2d(p, v[1], None, 2, 0)?;
        let s = t.softmax(p, 3)?;
        let s = t.sigmoid(s);
        let c = t.constant(weights.clone());
        let prod = t.mul(s, c)?;
        Ok(t.sum(prod))
    })?;
    let matmul = gradcheck(&[u(&[2, 3, 4]), u(&[2, 4, 5])], 1e-5, |t, v| {
        let y = t.batch_matmul(v[0], v[1])?;
        let y = t.square(y);
        let y = t.add_scalar(y, 1.0);
        let y = t.sqrt(y);
        Ok(t.mean(y))
    })?;
    let worst = composite.max_relative_error.max(matmul.max_relative_error);
    Ok((worst < GRAD_TOL, format!("max relative error {worst:.2e}")))
}

struct AttentionBlock {
    config: AttentionConfig,
    h: usize,
    w: usize,
}

impl LossFn for AttentionBlock {
    fn eval<T: Element>(&self, tape: &mut Tape<T>, x: &[Var]) -> rasm_tensor::Result<Var> {
        let p = AttentionParams::from_slice(&x[1..]);
        let y = regional_attention(tape, x[0], &p, &self.config, self.h, self.w)
            .map_err(|e| TensorError::Contract(e.to_string()))?;
        let coeff = tape.constant(Tensor::from_fn(tape.shape(y), |i| T::cast((i as f64 * 0.7).cos())));
        let prod = tape.mul(y, coeff)?;
        Ok(tape.sum(prod))
    }
}

fn attention_gradients() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let config = AttentionConfig { region_size: 3, dilation: 2, num_heads: 2, embed_dim: 4 };
    let (h, w) = (5, 6);
    let weights = AttentionWeights::<f64>::random(4, 2, config.table_side(), 0.5, &mut rng);
    let mut inputs = vec![Tensor::<f64>::uniform(&[1, h * w, 4], -1.0, 1.0, &mut rng)];
    inputs.extend(weights.tensors().into_iter().cloned());
    let report = gradcheck_at::<f64, _>(&inputs, 1e-5, &AttentionBlock { config, h, w })?;
    // the key bias (index 4 = input 0 + 3) has an identically zero gradient
    let worst = report.relative_errors.iter().enumerate().filter(|(i, _)| *i != 4).map(|(_, e)| *e).fold(0.0, f64::max);
    Ok((worst < GRAD_TOL, format!("max relative error {worst:.2e} (key bias excluded)")))
}

struct Network {
    config: ModelConfig,
    paths: Vec<String>,
    fixed: BTreeMap<String, Tensor<f64>>,
}

impl LossFn for Network {
    fn eval<T: Element>(&self, tape: &mut Tape<T>, x: &[Var]) -> rasm_tensor::Result<Var> {
        let mut vars: BTreeMap<_, _> = self.paths.iter().cloned().zip(x[2..].iter().copied()).collect();
        for (k, t) in &self.fixed {
            vars.insert(k.clone(), tape.constant(t.cast()));
        }
        let out = rasm_forward(tape, x[0], x[1], &Bound::from_vars(vars), &self.config)
            .map_err(|e| TensorError::Contract(e.to_string()))?;
        let coeff = tape.constant(Tensor::from_fn(tape.shape(out), |i| T::cast((i as f64 * 0.61).sin())));
        let prod = tape.mul(out, coeff)?;
        Ok(tape.sum(prod))
    }
}

/// The smallest useful model: one stage of width 4 on 8x8 inputs.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        depth: 1,
        base_channels: 4,
        channel_multipliers: vec![1, 2],
        ca_blocks_per_module: 1,
        ram_blocks: 1,
        mlp_ratio: 2,
        ca_reduction: 4,
        attention: BottleneckAttention { region_size: 3, dilation: 1, num_heads: 2, ..Default::default() },
    }
}

fn network_gradients() -> Result<(bool, String)> {
    let config = micro_config();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut params = ParameterSet::<f64>::init(&config, &mut rng)?;
    for (_, t) in params.iter_mut() {
        let noise = Tensor::<f64>::randn(t.shape(), 0.3, &mut rng);
        *t = t.zip_map(&noise, |a, b| a + b)?;
    }
    let is_fixed = |k: &str| k.ends_with(".attn.bk");
    let paths: Vec<String> = params.paths().filter(|k| !is_fixed(k)).cloned().collect();
    let fixed = params.iter().filter(|(k, _)| is_fixed(k)).map(|(k, t)| (k.clone(), t.clone())).collect();
    let mut inputs = vec![
        Tensor::<f64>::uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng),
        Tensor::from_fn(&[1, 1, 8, 8], |i| ((i / 8) >= 3 && (i % 8) < 5) as u8 as f64),
    ];
    inputs.extend(paths.iter().map(|k| params.get(k).cloned()).collect::<Result<Vec<_>>>()?);
    let report = gradcheck_at::<f64, _>(&inputs, 1e-5, &Network { config, paths, fixed })?;
    Ok((report.passes(GRAD_TOL), format!("max relative error {:.2e}", report.max_relative_error)))
}

fn metric_identities() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::<f64>::uniform(&[3, 16, 16], 0.0, 0.9, &mut rng);
    let p20 = psnr(&x, &x.map(|v| v + 0.1), None)?;
    let s = ssim(&x, &x, None)?;
    let white = srgb_pixel_to_lab([1.0; 3]);
    let ok = (p20 - 20.0).abs() < 1e-6 && (s - 1.0).abs() < 1e-12 && (white[0] - 100.0).abs() < 0.01;
    Ok((ok, format!("psnr {p20:.9} dB, ssim(x, x) {s}, L*(white) {:.4}", white[0])))
}

fn checkpoint_round_trip() -> Result<(bool, String)> {
    let mut config = RunConfig::default();
    config.model = micro_config();
    config.train.crop_size = 32;
    let ck = init_checkpoint(config)?;
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes)?;
    let ok = back == ck && back.to_bytes() == bytes;
    Ok((ok, format!("{} bytes", bytes.len())))
}

/// Runs every suite; a suite that errors counts as failed.
pub fn run_all() -> Vec<CheckResult> {
    let suites: [(&'static str, fn() -> Result<(bool, String)>); 7] = [
        ("regional-vs-global-oracle", oracle_equivalence),
        ("full-attention-reduction", full_reduction),
        ("gradcheck-ops", op_gradients),
        ("gradcheck-attention-block", attention_gradients),
        ("gradcheck-micro-network", network_gradients),
        ("metric-identities", metric_identities),
        ("checkpoint-round-trip", checkpoint_round_trip),
    ];
    suites
        .into_iter()
        .map(|(name, f)| match f() {
            Ok((passed, detail)) => CheckResult { name, passed, detail },
            Err(e) => CheckResult { name, passed: false, detail: format!("error: {e}") },
        })
        .collect()
}
