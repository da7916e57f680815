//! Central finite-difference verification of tape gradients.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A scalar function that can be recorded at any precision.
pub trait LossFn {
    fn eval<T: Element>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var>;
}

/// Outcome of [`gradcheck`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Norm-wise relative error per input:
    /// `|analytic - numeric| / max(|analytic|, |numeric|)`.
    pub relative_errors: Vec<f64>,
    pub max_relative_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Gradient norms below this are compared absolutely instead of relatively.
const ABS_FLOOR: f64 = 1e-9;

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences of step `eps`, for every element of every input.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Option<Tensor<f64>>> = vars.iter().map(|&v| grads.get(v).cloned()).collect();
    compare(inputs, eps, analytic, |values| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    })
}

/// Like [`gradcheck`], but the analytic gradient is recorded at precision
/// `T` while the finite differences are always taken in `f64`.
pub fn gradcheck_at<T: Element, F: LossFn>(inputs: &[Tensor<f64>], eps: f64, f: &F) -> Result<GradCheckReport> {
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.cast())).collect();
    let loss = f.eval(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Option<Tensor<f64>>> = vars.iter().map(|&v| grads.get(v).map(|g| g.cast())).collect();
    compare(inputs, eps, analytic, |values| {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f.eval(&mut tape, &vars)?;
        tape.value(out).item()
    })
}

fn compare(
    inputs: &[Tensor<f64>],
    eps: f64,
    analytic: Vec<Option<Tensor<f64>>>,
    eval: impl Fn(&[Tensor<f64>]) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut relative_errors = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = analytic[i].clone().unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut numeric = vec![0.0; input.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * eps);
        }
        if numeric.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::Contract(format!("non-finite finite difference for input {i}")));
        }
        let diff = analytic.data().iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = norm(analytic.data()).max(norm(&numeric));
        relative_errors.push(if scale < ABS_FLOOR { diff } else { diff / scale });
    }
    let max_relative_error = relative_errors.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport { relative_errors, max_relative_error })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
