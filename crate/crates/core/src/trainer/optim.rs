use pixelda_tensor::{ParamKind, ParamSet, Scalar, Tensor};

use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.5;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam step on one value, with L2 weight decay folded into the gradient.
/// `t` is the 1-based step count. Returns the new value.
pub fn adam_update(value: f64, grad: f64, m: &mut f64, v: &mut f64, t: u64, lr: f64, weight_decay: f64) -> f64 {
    let g = grad + weight_decay * value;
    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
    let m_hat = *m / (1.0 - ADAM_BETA1.powi(t as i32));
    let v_hat = *v / (1.0 - ADAM_BETA2.powi(t as i32));
    value - lr * m_hat / (v_hat.sqrt() + ADAM_EPS)
}

/// Adam moments for the trainable entries of one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Scalar = f32> {
    /// Entries in parameter-set order; buffers hold empty tensors.
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros = |p: &pixelda_tensor::Parameter<T>| match p.kind {
            ParamKind::Trainable => Tensor::zeros(p.value.shape().to_vec()),
            ParamKind::Buffer => Tensor::zeros([0]),
        };
        Adam { m: params.iter().map(zeros).collect(), v: params.iter().map(zeros).collect(), step: 0 }
    }

    /// Applies one update from the accumulated gradients. Nothing is written if any new
    /// value would be non-finite.
    pub fn apply(&mut self, params: &mut ParamSet<T>, lr: f64, weight_decay: f64) -> Result<()> {
        let t = self.step + 1;
        let mut staged = Vec::with_capacity(params.len());
        for (i, p) in params.iter().enumerate() {
            if p.kind == ParamKind::Buffer {
                staged.push(None);
                continue;
            }
            let (mut m, mut v) = (self.m[i].clone(), self.v[i].clone());
            let mut value = p.value.clone();
            for (((x, &g), mi), vi) in value.data_mut().iter_mut().zip(p.grad.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let (mut mf, mut vf) = (mi.as_f64(), vi.as_f64());
                let nx = adam_update(x.as_f64(), g.as_f64(), &mut mf, &mut vf, t, lr, weight_decay);
                *x = T::lit(nx);
                *mi = T::lit(mf);
                *vi = T::lit(vf);
            }
            if !value.is_finite() {
                return Err(Error::Diverged { step: t, phase: "update", detail: format!("non-finite update of {}", p.name) });
            }
            staged.push(Some((value, m, v)));
        }
        for (i, (p, s)) in params.iter_mut().zip(staged).enumerate() {
            if let Some((value, m, v)) = s {
                p.value = value;
                self.m[i] = m;
                self.v[i] = v;
            }
        }
        self.step = t;
        Ok(())
    }
}

/// Staircase decay `base * factor^floor(step / interval)`.
pub fn lr_schedule(base_lr: f64, factor: f64, interval: u64, step: u64) -> f64 {
    base_lr * factor.powi((step / interval.max(1)) as i32)
}
