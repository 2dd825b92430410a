//! Domain, task, content-similarity and pose losses, and their weighted combination
//! for the two alternating optimization phases.

use pixelda_tensor::{Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::TaskOutput;

/// Likelihoods are clamped into `[LIKELIHOOD_CLAMP, 1 - LIKELIHOOD_CLAMP]` before any log.
pub const LIKELIHOOD_CLAMP: f64 = 1e-7;
/// `|q·q̂|` is clamped to at most `1 - POSE_CLAMP` so the pose log stays finite.
pub const POSE_CLAMP: f64 = 1e-6;

/// Loss weights and the routing flags of the two training phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Domain (discriminator) loss weight in the D step.
    pub alpha: f64,
    /// Task loss weight in the D step.
    pub beta: f64,
    /// Content-similarity (masked PMSE) weight in the G step.
    pub gamma: f64,
    /// Pose term weight inside the task loss.
    pub xi: f64,
    /// Weight of the generator's adversarial term in the G step.
    pub generator_weight: f64,
    /// Task loss weight in the G step.
    pub task_weight_in_g_step: f64,
    pub train_t_on_source: bool,
    pub train_t_on_adapted: bool,
    /// `-log D(G(x))` when set, the literal `log(1 - D(G(x)))` otherwise.
    pub nonsaturating_generator: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.0,
            xi: 0.0,
            generator_weight: 1.0,
            task_weight_in_g_step: 1.0,
            train_t_on_source: true,
            train_t_on_adapted: true,
            nonsaturating_generator: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("xi", self.xi),
            ("generator_weight", self.generator_weight),
            ("task_weight_in_g_step", self.task_weight_in_g_step),
        ];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} = {w} must be finite and >= 0")));
            }
        }
        if self.beta > 0.0 && !self.train_t_on_source && !self.train_t_on_adapted {
            return Err(Error::Config("beta > 0 needs at least one task stream enabled".into()));
        }
        Ok(())
    }

    /// Whether T receives any loss during adversarial training.
    pub fn trains_task(&self) -> bool {
        self.beta > 0.0 && (self.train_t_on_source || self.train_t_on_adapted)
    }
}

fn clamped_log<T: Scalar>(tape: &mut Tape<T>, p: Var, one_minus: bool) -> Result<Var> {
    let c = tape.clamp(p, LIKELIHOOD_CLAMP, 1.0 - LIKELIHOOD_CLAMP)?;
    let c = if one_minus { tape.affine(c, -1.0, 1.0)? } else { c };
    Ok(tape.log(c)?)
}

fn check_nonempty<T: Scalar>(tape: &Tape<T>, v: Var, what: &str) -> Result<()> {
    if tape.value(v).is_empty() {
        return Err(Error::Invalid(format!("{what}: empty batch")));
    }
    Ok(())
}

/// `mean log d_real + mean log(1 - d_fake)`; maximized by D, minimized by G.
pub fn domain_loss<T: Scalar>(tape: &mut Tape<T>, d_real: Var, d_fake: Var) -> Result<Var> {
    check_nonempty(tape, d_real, "domain loss")?;
    check_nonempty(tape, d_fake, "domain loss")?;
    let lr = clamped_log(tape, d_real, false)?;
    let lf = clamped_log(tape, d_fake, true)?;
    let (mr, mf) = (tape.mean(lr)?, tape.mean(lf)?);
    Ok(tape.add(mr, mf)?)
}

/// Generator adversarial term, minimized w.r.t. θ_G.
pub fn generator_adversarial_loss<T: Scalar>(tape: &mut Tape<T>, d_fake: Var, nonsaturating: bool) -> Result<Var> {
    check_nonempty(tape, d_fake, "generator loss")?;
    if nonsaturating {
        let l = clamped_log(tape, d_fake, false)?;
        let m = tape.mean(l)?;
        Ok(tape.scale(m, -1.0)?)
    } else {
        let l = clamped_log(tape, d_fake, true)?;
        Ok(tape.mean(l)?)
    }
}

/// `ξ · mean log(1 - |q·q̂|)` over the batch.
pub fn pose_loss<T: Scalar>(tape: &mut Tape<T>, q_hat: Var, q: &Tensor<T>, xi: f64) -> Result<Var> {
    let qh = tape.value(q_hat);
    if qh.shape() != q.shape() || qh.rank() != 2 || qh.dim(1) != 4 {
        return Err(Error::Invalid(format!("pose prediction {:?} vs ground truth {:?}", qh.shape(), q.shape())));
    }
    let prod = tape.mul_const(q_hat, q.clone())?;
    let dots = tape.sum_trailing(prod, 1)?;
    let mag = tape.abs(dots)?;
    let mag = tape.clamp(mag, 0.0, 1.0 - POSE_CLAMP)?;
    let gap = tape.affine(mag, -1.0, 1.0)?;
    let logs = tape.log(gap)?;
    let m = tape.mean(logs)?;
    Ok(tape.scale(m, xi)?)
}

/// One stream of the task loss: cross-entropy, plus the pose term when `output` has a pose head.
pub fn task_stream_loss<T: Scalar>(
    tape: &mut Tape<T>,
    output: &TaskOutput,
    onehot: &Tensor<T>,
    poses: Option<&Tensor<T>>,
    xi: f64,
) -> Result<Var> {
    let ce = tape.softmax_cross_entropy(output.logits, onehot)?;
    match (output.pose, poses) {
        (Some(q_hat), Some(q)) => {
            let p = pose_loss(tape, q_hat, q, xi)?;
            Ok(tape.add(ce, p)?)
        }
        (Some(_), None) => Err(Error::Invalid("pose predicted but no ground-truth quaternion supplied".into())),
        (None, _) => Ok(ce),
    }
}

/// Task loss summed over the enabled streams (equal weights).
pub fn task_loss<T: Scalar>(
    tape: &mut Tape<T>,
    source: Option<&TaskOutput>,
    adapted: Option<&TaskOutput>,
    onehot: &Tensor<T>,
    poses: Option<&Tensor<T>>,
    xi: f64,
) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    for out in [source, adapted].into_iter().flatten() {
        let l = task_stream_loss(tape, out, onehot, poses, xi)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    Ok(total)
}

/// Broadcasts a `[B, 1, H, W]` (or `[B, H, W]`) binary mask over `channels`.
fn expand_mask<T: Scalar>(mask: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let ms = mask.shape();
    let ok = ms == [b, 1, h, w] || ms == [b, h, w];
    if !ok {
        return Err(Error::Invalid(format!("mask {ms:?} does not match images {shape:?}")));
    }
    if mask.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::Invalid("mask values must be 0 or 1".into()));
    }
    let plane = h * w;
    Ok(Tensor::from_fn(shape.to_vec(), |i| {
        let n = i / (c * plane);
        mask.data()[n * plane + i % plane]
    }))
}

/// Masked pairwise mean squared error between source and generated images.
///
/// Per image and channel, with `d = x_s - x_f` and `k = H·W`:
/// `(1/k)‖d∘m‖² - (1/k²)(dᵀm)²`, then averaged over batch and channels.
pub fn masked_pmse<T: Scalar>(tape: &mut Tape<T>, x_s: Var, x_f: Var, mask: &Tensor<T>) -> Result<Var> {
    let shape = tape.value(x_s).shape().to_vec();
    if shape.len() != 4 || tape.value(x_f).shape() != shape.as_slice() {
        return Err(Error::Invalid(format!(
            "masked_pmse images {:?} vs {:?}",
            shape,
            tape.value(x_f).shape()
        )));
    }
    let k = (shape[2] * shape[3]) as f64;
    let m = expand_mask(mask, &shape)?;
    let diff = tape.sub(x_s, x_f)?;
    let dm = tape.mul_const(diff, m)?;
    let sq = tape.mul(dm, dm)?;
    let sq_sum = tape.sum_trailing(sq, 2)?;
    let lin_sum = tape.sum_trailing(dm, 2)?;
    let lin_sq = tape.mul(lin_sum, lin_sum)?;
    let a = tape.scale(sq_sum, 1.0 / k)?;
    let b = tape.scale(lin_sq, 1.0 / (k * k))?;
    let per = tape.sub(a, b)?;
    Ok(tape.mean(per)?)
}

/// Unmasked pairwise MSE of two equal-length signals, straight from the pairwise definition
/// `1/(2n²) Σ_i Σ_j ((a_i - b_i) - (a_j - b_j))²`.
pub fn pairwise_mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mut total = 0.0;
    for &di in &d {
        for &dj in &d {
            total += (di - dj) * (di - dj);
        }
    }
    total / (2.0 * n * n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Updates θ_D and θ_T with θ_G fixed.
    DStep,
    /// Updates θ_G with θ_D and θ_T fixed.
    GStep,
}

/// Loss values recorded on the tape for one phase. Absent terms are skipped.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    /// `L_d` (D step).
    pub domain: Option<Var>,
    /// Generator adversarial term (G step).
    pub generator: Option<Var>,
    /// `L_t`.
    pub task: Option<Var>,
    /// `L_c` (G step).
    pub content: Option<Var>,
}

/// Scalar minimized in `phase`.
///
/// The D step minimizes `-α·L_d + β·L_t` (the discriminator's binary cross-entropy);
/// the G step minimizes `generator_weight·adv + task_weight_in_g_step·L_t + γ·L_c`.
pub fn combined_objective<T: Scalar>(tape: &mut Tape<T>, terms: &LossTerms, w: &LossWeights, phase: Phase) -> Result<Var> {
    let weighted: Vec<(Option<Var>, f64)> = match phase {
        Phase::DStep => vec![(terms.domain, -w.alpha), (terms.task, w.beta)],
        Phase::GStep => vec![
            (terms.generator, w.generator_weight),
            (terms.task, w.task_weight_in_g_step),
            (terms.content, w.gamma),
        ],
    };
    let mut total: Option<Var> = None;
    for (term, weight) in weighted {
        let Some(v) = term else { continue };
        if weight == 0.0 {
            continue;
        }
        let s = tape.scale(v, weight)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(tape.constant(Tensor::scalar(T::zero()))?),
    }
}
