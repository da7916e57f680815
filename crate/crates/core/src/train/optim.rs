use std::collections::BTreeMap;

use rasm_tensor::{Element, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ParameterSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, weight_decay: 0.02, eps: 1e-8 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.weight_decay >= 0.0
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Config("optimizer: need 0 <= beta < 1, weight_decay >= 0, eps > 0".into()));
        }
        Ok(())
    }
}

/// Adam moment buffers keyed by parameter path.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> OptimizerState<T> {
    /// Zero moments mirroring `params`.
    pub fn new(params: &ParameterSet<T>) -> Self {
        let zeros: BTreeMap<_, _> = params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }

    /// Checks that the moment buffers mirror `params`.
    pub fn check_against(&self, params: &ParameterSet<T>) -> Result<()> {
        for buffers in [&self.m, &self.v] {
            if buffers.len() != params.len() {
                return Err(Error::Checkpoint("optimizer state does not match the parameter set".into()));
            }
            for (k, t) in params.iter() {
                match buffers.get(k) {
                    Some(b) if b.shape() == t.shape() => {}
                    _ => return Err(Error::Checkpoint(format!("optimizer state for {k} is missing or misshapen"))),
                }
            }
        }
        Ok(())
    }
}

/// Global L2 norm of `grads`.
pub fn grad_norm<T: Element>(grads: &BTreeMap<String, Tensor<T>>) -> f64 {
    grads.values().flat_map(|g| g.data()).map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Element>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = T::cast(v.as_f64() * s));
        }
    }
    norm
}

/// One AdamW update: decoupled weight decay `p -= lr * wd * p`, then the
/// bias-corrected Adam step. Parameters without a gradient entry are treated
/// as having a zero gradient. Nothing is modified if any gradient is
/// non-finite.
pub fn adamw_step<T: Element>(
    params: &mut ParameterSet<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut OptimizerState<T>,
    config: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Training(format!("learning rate must be positive, got {lr}")));
    }
    for (path, g) in grads {
        let p = params.get(path).map_err(|_| Error::Training(format!("gradient for unknown parameter {path}")))?;
        if g.shape() != p.shape() {
            return Err(Error::Training(format!("gradient for {path} has shape {:?}, expected {:?}", g.shape(), p.shape())));
        }
        if !g.all_finite() {
            return Err(Error::Training(format!("non-finite gradient for {path}")));
        }
    }
    state.check_against(params)?;

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    let decay = 1.0 - lr * config.weight_decay;
    for (path, p) in params.iter_mut() {
        let m = state.m.get_mut(path).expect("checked");
        let v = state.v.get_mut(path).expect("checked");
        let g = grads.get(path).map(|g| g.data());
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = g.map_or(0.0, |g| g[i].as_f64());
            let mi = b1 * md[i].as_f64() + (1.0 - b1) * gi;
            let vi = b2 * vd[i].as_f64() + (1.0 - b2) * gi * gi;
            md[i] = T::cast(mi);
            vd[i] = T::cast(vi);
            let step = lr * (mi / c1) / ((vi / c2).sqrt() + config.eps);
            pd[i] = T::cast(pd[i].as_f64() * decay - step);
        }
    }
    Ok(())
}
