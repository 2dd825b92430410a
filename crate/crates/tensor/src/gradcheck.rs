//! Finite-difference verification of tape gradients.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-4;

/// Largest relative error between backward() and fourth-order central differences over every
/// input element.
///
/// The relative error of one element is `|a - f| / max(|a|, |f|, 1e-8)`. The graph built by `f`
/// must be deterministic; stochastic layers have to be disabled or frozen.
pub fn grad_check<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = xs.iter().map(|x| tape.constant(x.clone())).collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let vars = inputs.iter().map(|x| tape.var(x.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let base = tape.value(out).clone();
    let grads = tape.backward(out)?;
    if eval(inputs)? != base.item() {
        return Err(TensorError::NonDeterministic);
    }

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (t, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[t].shape().to_vec()));
        for i in 0..inputs[t].len() {
            let orig = inputs[t].data()[i];
            let mut at = |d: f64| -> Result<f64> {
                probe[t].data_mut()[i] = orig + d;
                eval(&probe)
            };
            let (p1, m1, p2, m2) = (at(eps)?, at(-eps)?, at(2.0 * eps)?, at(-2.0 * eps)?);
            probe[t].data_mut()[i] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
