//! Parameterized building blocks shared by the three networks.

use pixelda_tensor::{BatchStats, Bound, Padding, ParamId, ParamKind, ParamSet, Scalar, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

/// Standard deviation of the zero-centered Gaussian used for every weight.
pub const INIT_STDDEV: f64 = 0.02;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}

pub(crate) fn gaussian<T: Scalar, R: Rng + ?Sized>(shape: Vec<usize>, rng: &mut R) -> Tensor<T> {
    let normal = Normal::new(0.0, INIT_STDDEV).expect("valid stddev");
    Tensor::from_fn(shape, |_| T::lit(normal.sample(rng)))
}

#[derive(Debug, Clone)]
pub(crate) struct Conv {
    kernel: ParamId,
    bias: Option<ParamId>,
    stride: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let kernel = params.add(format!("{name}/kernel"), gaussian(vec![out_c, in_c, k, k], rng), ParamKind::Trainable)?;
        let bias = if bias {
            Some(params.add(format!("{name}/bias"), Tensor::zeros([out_c]), ParamKind::Trainable)?)
        } else {
            None
        };
        Ok(Conv { kernel, bias, stride })
    }

    pub fn kernel(&self) -> ParamId {
        self.kernel
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, b.var(self.kernel), self.stride, Padding::Same)?;
        Ok(match self.bias {
            Some(bias) => tape.add_bias(y, b.var(bias))?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Dense {
    weight: ParamId,
    bias: ParamId,
}

impl Dense {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = params.add(format!("{name}/weight"), gaussian(vec![inputs, outputs], rng), ParamKind::Trainable)?;
        let bias = params.add(format!("{name}/bias"), Tensor::zeros([outputs]), ParamKind::Trainable)?;
        Ok(Dense { weight, bias })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &Bound, x: Var) -> Result<Var> {
        Ok(tape.fully_connected(x, b.var(self.weight), b.var(self.bias))?)
    }
}

/// Batch statistics observed in train mode, to be folded into the running averages.
#[derive(Debug, Clone)]
pub struct BnUpdate<T: Scalar> {
    mean: ParamId,
    var: ParamId,
    stats: BatchStats<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct Norm {
    scale: ParamId,
    offset: ParamId,
    mean: ParamId,
    var: ParamId,
}

impl Norm {
    pub fn new<T: Scalar>(params: &mut ParamSet<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Norm {
            scale: params.add(format!("{name}/scale"), Tensor::ones([channels]), ParamKind::Trainable)?,
            offset: params.add(format!("{name}/offset"), Tensor::zeros([channels]), ParamKind::Trainable)?,
            mean: params.add(format!("{name}/moving_mean"), Tensor::zeros([channels]), ParamKind::Buffer)?,
            var: params.add(format!("{name}/moving_var"), Tensor::ones([channels]), ParamKind::Buffer)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        params: &ParamSet<T>,
        x: Var,
        mode: Mode,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Result<Var> {
        let (s, o) = (b.var(self.scale), b.var(self.offset));
        match mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm_train(x, s, o, BN_EPS)?;
                updates.push(BnUpdate { mean: self.mean, var: self.var, stats });
                Ok(y)
            }
            Mode::Eval => {
                let (m, v) = (params.get(self.mean).value.data(), params.get(self.var).value.data());
                Ok(tape.batch_norm_eval(x, s, o, m, v, BN_EPS)?)
            }
        }
    }
}

/// Folds batch statistics into running averages; the variance uses the unbiased estimate.
pub fn apply_bn_updates<T: Scalar>(params: &mut ParamSet<T>, updates: &[BnUpdate<T>]) {
    let m = T::lit(BN_MOMENTUM);
    let one_m = T::lit(1.0 - BN_MOMENTUM);
    for u in updates {
        let n = u.stats.count as f64;
        let correction = T::lit(n / (n - 1.0));
        for (r, &bm) in params.get_mut(u.mean).value.data_mut().iter_mut().zip(&u.stats.mean) {
            *r = m * *r + one_m * bm;
        }
        for (r, &bv) in params.get_mut(u.var).value.data_mut().iter_mut().zip(&u.stats.var) {
            *r = m * *r + one_m * bv * correction;
        }
    }
}
