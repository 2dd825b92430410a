use pixelda_tensor::{Bound, ParamSet, Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Conv, Dense, Mode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub base_filters: usize,
    pub dropout_keep: f64,
    pub noise_stddev: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig { base_filters: 64, dropout_keep: 0.9, noise_stddev: 0.2 }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_filters < 1 {
            return Err(Error::Config("discriminator.base_filters must be >= 1".into()));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::Config(format!("discriminator.dropout_keep {} not in (0, 1]", self.dropout_keep)));
        }
        if !(self.noise_stddev >= 0.0 && self.noise_stddev.is_finite()) {
            return Err(Error::Config(format!("discriminator.noise_stddev {}", self.noise_stddev)));
        }
        Ok(())
    }
}

/// Number of stride-2 stages needed to bring `h x w` down to at most 4x4.
pub fn pyramid_stages(h: usize, w: usize) -> usize {
    let (mut h, mut w, mut n) = (h, w, 0);
    while h > 4 || w > 4 {
        h = h.div_ceil(2);
        w = w.div_ceil(2);
        n += 1;
    }
    n
}

/// Convolutional pyramid ending in a single sigmoid unit: likelihood of the target domain.
#[derive(Debug, Clone)]
pub struct Discriminator<T: Scalar = f32> {
    pub config: DiscriminatorConfig,
    pub params: ParamSet<T>,
    input: [usize; 3],
    convs: Vec<Conv>,
    filters: Vec<usize>,
    head: Dense,
}

impl<T: Scalar> Discriminator<T> {
    /// `input` is `[channels, height, width]`.
    pub fn new<R: Rng + ?Sized>(config: DiscriminatorConfig, input: [usize; 3], rng: &mut R) -> Result<Self> {
        config.validate()?;
        let [c, h, w] = input;
        if h < 4 || w < 4 {
            return Err(Error::Invalid(format!("discriminator input {h}x{w} is below 4x4")));
        }
        let mut params = ParamSet::new();
        let stages = pyramid_stages(h, w);
        let mut convs = Vec::with_capacity(stages + 1);
        let mut filters = Vec::with_capacity(stages + 1);
        let (mut in_c, mut oh, mut ow) = (c, h, w);
        for i in 0..=stages {
            let out_c = config.base_filters << i;
            let stride = if i == 0 { 1 } else { 2 };
            convs.push(Conv::new(&mut params, &format!("discriminator/conv{i}"), in_c, out_c, 3, stride, true, rng)?);
            filters.push(out_c);
            in_c = out_c;
            if stride == 2 {
                oh = oh.div_ceil(2);
                ow = ow.div_ceil(2);
            }
        }
        let head = Dense::new(&mut params, "discriminator/logit", in_c * oh * ow, 1, rng)?;
        Ok(Discriminator { config, params, input, convs, filters, head })
    }

    pub fn init(config: DiscriminatorConfig, input: [usize; 3], seed: u64) -> Result<Self> {
        Self::new(config, input, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn cast<U: Scalar>(&self) -> Discriminator<U> {
        Discriminator {
            config: self.config.clone(),
            params: self.params.cast(),
            input: self.input,
            convs: self.convs.clone(),
            filters: self.filters.clone(),
            head: self.head.clone(),
        }
    }

    /// Output channels of each conv layer, the stride-1 layer first.
    pub fn filters(&self) -> &[usize] {
        &self.filters
    }

    /// Likelihoods in (0, 1), shaped `[B]`. Train mode applies dropout and noise after every conv layer.
    pub fn forward<R: Rng + ?Sized>(&self, tape: &mut Tape<T>, b: &Bound, x: Var, mode: Mode, rng: &mut R) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1..] != self.input {
            return Err(Error::Invalid(format!("discriminator configured for {:?}, got {:?}", self.input, shape)));
        }
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(tape, b, h)?;
            h = tape.leaky_relu(h)?;
            h = tape.stochastic_regularizers(h, self.config.dropout_keep, self.config.noise_stddev, mode.is_train(), rng)?;
        }
        let h = tape.flatten(h)?;
        let logit = self.head.forward(tape, b, h)?;
        let p = tape.sigmoid(logit)?;
        Ok(tape.reshape(p, [shape[0]])?)
    }

    /// Eval-mode likelihoods outside any training graph.
    pub fn discriminate(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false)?;
        let xv = tape.constant(x.clone())?;
        // Eval mode never draws from the generator.
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let d = self.forward(&mut tape, &b, xv, Mode::Eval, &mut unused)?;
        Ok(tape.value(d).clone())
    }
}
