use pixelda_tensor::{Bound, ParamSet, Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{apply_bn_updates, BnUpdate, Conv, Dense, Mode, Norm};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub image_channels: usize,
    pub residual_blocks: usize,
    pub filters: usize,
    pub noise_dim: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig { image_height: 32, image_width: 32, image_channels: 3, residual_blocks: 6, filters: 64, noise_dim: 10 }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.residual_blocks < 1 {
            return Err(Error::Config("generator.residual_blocks must be >= 1".into()));
        }
        if self.noise_dim < 1 {
            return Err(Error::Config("generator.noise_dim must be >= 1".into()));
        }
        if self.filters < 1 || self.image_channels < 1 || self.image_height < 1 || self.image_width < 1 {
            return Err(Error::Config("generator filters and image extents must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ResidualBlock {
    conv1: Conv,
    bn1: Norm,
    conv2: Conv,
    bn2: Norm,
}

/// Resolution-preserving residual generator conditioned on a noise plane.
#[derive(Debug, Clone)]
pub struct Generator<T: Scalar = f32> {
    pub config: GeneratorConfig,
    pub params: ParamSet<T>,
    noise_fc: Dense,
    conv_in: Conv,
    blocks: Vec<ResidualBlock>,
    conv_out: Conv,
}

impl<T: Scalar> Generator<T> {
    pub fn new<R: Rng + ?Sized>(config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let (c, f) = (config.image_channels, config.filters);
        let plane = config.image_height * config.image_width;
        let noise_fc = Dense::new(&mut params, "generator/noise_fc", config.noise_dim, plane, rng)?;
        let conv_in = Conv::new(&mut params, "generator/conv_in", c + 1, f, 3, 1, true, rng)?;
        let mut blocks = Vec::with_capacity(config.residual_blocks);
        for i in 0..config.residual_blocks {
            let p = format!("generator/res{i}");
            blocks.push(ResidualBlock {
                conv1: Conv::new(&mut params, &format!("{p}/conv1"), f, f, 3, 1, false, rng)?,
                bn1: Norm::new(&mut params, &format!("{p}/bn1"), f)?,
                conv2: Conv::new(&mut params, &format!("{p}/conv2"), f, f, 3, 1, false, rng)?,
                bn2: Norm::new(&mut params, &format!("{p}/bn2"), f)?,
            });
        }
        let conv_out = Conv::new(&mut params, "generator/conv_out", f, c, 3, 1, true, rng)?;
        Ok(Generator { config, params, noise_fc, conv_in, blocks, conv_out })
    }

    /// Deterministic initialization from a seed.
    pub fn init(config: GeneratorConfig, seed: u64) -> Result<Self> {
        Self::new(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Scalar>(&self) -> Generator<U> {
        Generator {
            config: self.config.clone(),
            params: self.params.cast(),
            noise_fc: self.noise_fc.clone(),
            conv_in: self.conv_in.clone(),
            blocks: self.blocks.clone(),
            conv_out: self.conv_out.clone(),
        }
    }

    /// Kernel parameter names of each residual block's convolutions.
    pub fn residual_kernels(&self) -> Vec<String> {
        self.blocks
            .iter()
            .flat_map(|b| [b.conv1.kernel(), b.conv2.kernel()])
            .map(|id| self.params.get(id).name.clone())
            .collect()
    }

    pub fn check_input(&self, x: &[usize], z: &[usize]) -> Result<()> {
        let c = &self.config;
        if x.len() != 4 || x[1..] != [c.image_channels, c.image_height, c.image_width] {
            return Err(Error::Invalid(format!(
                "generator configured for {}x{}x{} images, got {:?}",
                c.image_channels, c.image_height, c.image_width, x
            )));
        }
        if z != [x[0], c.noise_dim] {
            return Err(Error::Invalid(format!("noise {:?} does not match batch {} x dim {}", z, x[0], c.noise_dim)));
        }
        Ok(())
    }

    /// `x_f = G(x_s, z)`. Train mode returns batch-norm statistics for [`Generator::commit`].
    pub fn forward(&self, tape: &mut Tape<T>, b: &Bound, x: Var, z: Var, mode: Mode) -> Result<(Var, Vec<BnUpdate<T>>)> {
        self.check_input(tape.value(x).shape(), tape.value(z).shape())?;
        let c = &self.config;
        let batch = tape.value(x).dim(0);
        let mut updates = Vec::new();
        let zp = self.noise_fc.forward(tape, b, z)?;
        let zp = tape.reshape(zp, [batch, 1, c.image_height, c.image_width])?;
        let h = tape.concat_channels(x, zp)?;
        let h = self.conv_in.forward(tape, b, h)?;
        let mut h = tape.relu(h)?;
        for blk in &self.blocks {
            let r = blk.conv1.forward(tape, b, h)?;
            let r = blk.bn1.forward(tape, b, &self.params, r, mode, &mut updates)?;
            let r = tape.relu(r)?;
            let r = blk.conv2.forward(tape, b, r)?;
            let r = blk.bn2.forward(tape, b, &self.params, r, mode, &mut updates)?;
            h = tape.add(h, r)?;
        }
        let out = self.conv_out.forward(tape, b, h)?;
        Ok((tape.tanh(out)?, updates))
    }

    /// Eval-mode generation outside any training graph.
    pub fn generate(&self, x: &Tensor<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false)?;
        let (xv, zv) = (tape.constant(x.clone())?, tape.constant(z.clone())?);
        let (out, _) = self.forward(&mut tape, &b, xv, zv, Mode::Eval)?;
        Ok(tape.value(out).clone())
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn commit(&mut self, updates: &[BnUpdate<T>]) {
        apply_bn_updates(&mut self.params, updates);
    }
}
