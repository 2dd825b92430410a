//! Alternating minimax optimization: a D step (θ_D, θ_T) then a G step (θ_G) per iteration.

mod checkpoint;
mod optim;

pub use checkpoint::{Checkpoint, RngState, MAGIC, VERSION};
pub use optim::{adam_update, lr_schedule, Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use pixelda_tensor::{Bound, ParamKind, ParamSet, Tape, TensorError, Var};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{images_from_tensor, sample_noise, Batch, BatchIterator, Dataset};
use crate::error::{io_err, Error, Result};
use crate::eval::grid::{GridImage, Tile};
use crate::losses::{
    combined_objective, domain_loss, generator_adversarial_loss, masked_pmse, task_loss, task_stream_loss, LossTerms,
    LossWeights, Phase,
};
use crate::models::{
    Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, Mode, Stream, TaskClassifier, TaskClassifierConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub decay_interval: u64,
    /// Adversarial iterations (one D step and one G step each).
    pub total_steps: u64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub profile: String,
    /// Loss rows are recorded every this many steps.
    pub log_interval: u64,
    /// 0 writes a checkpoint only at the end.
    pub checkpoint_interval: u64,
    /// 0 disables sample grids.
    pub sample_interval: u64,
    /// Steps training T on frozen-G adapted images after adversarial training, used when T
    /// receives no task loss during it. 0 means `total_steps`.
    pub task_only_steps: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            decay_factor: 0.95,
            decay_interval: 20_000,
            total_steps: 1000,
            batch_size: 32,
            weight_decay: 1e-5,
            seed: 0,
            profile: "default".into(),
            log_interval: 100,
            checkpoint_interval: 0,
            sample_interval: 0,
            task_only_steps: 0,
        }
    }
}

/// Everything that defines a training run apart from the data.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub classifier: TaskClassifierConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be >= 2".into()));
        }
        if !(t.decay_factor > 0.0 && t.decay_factor <= 1.0) {
            return Err(Error::Config(format!("train.decay_factor {} not in (0, 1]", t.decay_factor)));
        }
        if t.decay_interval == 0 {
            return Err(Error::Config("train.decay_interval must be >= 1".into()));
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::Config(format!("train.learning_rate {}", t.learning_rate)));
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            return Err(Error::Config(format!("train.weight_decay {}", t.weight_decay)));
        }
        if t.log_interval == 0 {
            return Err(Error::Config("train.log_interval must be >= 1".into()));
        }
        self.loss.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.classifier.validate()?;
        Ok(())
    }

    /// `[channels, height, width]` of every image the networks see.
    pub fn image_shape(&self) -> [usize; 3] {
        let g = &self.generator;
        [g.image_channels, g.image_height, g.image_width]
    }

    /// Number of post-hoc T steps following adversarial training (0 when T trains jointly).
    pub fn task_only_steps(&self) -> u64 {
        if self.loss.trains_task() {
            0
        } else if self.train.task_only_steps == 0 {
            self.train.total_steps
        } else {
            self.train.task_only_steps
        }
    }

    pub fn total_iterations(&self) -> u64 {
        self.train.total_steps + self.task_only_steps()
    }

    /// Stream that classifies target-domain images: the generated-stream stack whenever it
    /// receives training signal, the source stack otherwise.
    pub fn target_stream(&self, semi_supervised: bool) -> Stream {
        let w = &self.loss;
        if !w.trains_task() || w.train_t_on_adapted || semi_supervised {
            Stream::Generated
        } else {
            Stream::Source
        }
    }

    /// The generator stored in `ckpt`, built for this configuration.
    pub fn load_generator(&self, ckpt: &Checkpoint) -> Result<Generator> {
        let mut g = Generator::init(self.generator.clone(), 0)?;
        g.params.load_values(ckpt.network("generator"))?;
        Ok(g)
    }

    /// The task network stored in `ckpt`, built for this configuration.
    pub fn load_classifier(&self, ckpt: &Checkpoint) -> Result<TaskClassifier> {
        let mut t = TaskClassifier::init(self.classifier.clone(), self.image_shape(), 0)?;
        t.params.load_values(ckpt.network("classifier"))?;
        Ok(t)
    }
}

/// Labeled source, unlabeled target and, for semi-supervised runs, a small labeled target split.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub source: &'a Dataset,
    pub target: &'a Dataset,
    pub labeled_target: Option<&'a Dataset>,
}

impl TrainData<'_> {
    pub fn validate(&self, cfg: &ExperimentConfig) -> Result<()> {
        self.source.require_labels()?;
        let shape = cfg.image_shape();
        let mut splits = vec![self.source, self.target];
        if let Some(l) = self.labeled_target {
            l.require_labels()?;
            splits.push(l);
        }
        for ds in &splits {
            if ds.len() < cfg.train.batch_size {
                return Err(Error::Invalid(format!("split '{}' has {} items, fewer than one batch", ds.split, ds.len())));
            }
            if ds.image_shape() != Some(shape) {
                return Err(Error::Invalid(format!(
                    "split '{}' images {:?} do not match configured {:?}",
                    ds.split,
                    ds.image_shape(),
                    shape
                )));
            }
        }
        if self.source.class_count != cfg.classifier.class_count {
            return Err(Error::Invalid(format!(
                "source has {} classes, classifier {}",
                self.source.class_count, cfg.classifier.class_count
            )));
        }
        if cfg.loss.gamma > 0.0 && !self.source.has_masks() {
            return Err(Error::Invalid("content loss weight > 0 but the source split has no masks".into()));
        }
        if cfg.classifier.pose_head && !self.source.has_poses() {
            return Err(Error::Invalid("pose head enabled but the source split has no poses".into()));
        }
        Ok(())
    }
}

/// One recorded loss value.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub name: &'static str,
    pub value: f64,
}

/// Networks, optimizer state, random stream and data cursors of a run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: ExperimentConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub classifier: TaskClassifier,
    opt_g: Adam,
    opt_d: Adam,
    opt_t: Adam,
    step: u64,
    rng: ChaCha8Rng,
    source_iter: BatchIterator,
    target_iter: BatchIterator,
    labeled_iter: Option<BatchIterator>,
}

fn diverged(step: u64, phase: &'static str) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        Error::Tensor(TensorError::NonFinite { op }) => Error::Diverged { step, phase, detail: format!("non-finite {op}") },
        Error::Diverged { detail, .. } => Error::Diverged { step, phase, detail },
        other => other,
    }
}

fn scalar(tape: &Tape<f32>, v: Option<Var>) -> Option<f64> {
    v.map(|v| tape.value(v).item() as f64)
}

impl Trainer {
    /// Initializes every network and cursor from `config.train.seed`.
    pub fn new(config: ExperimentConfig, data: &TrainData) -> Result<Self> {
        config.validate()?;
        data.validate(&config)?;
        let mut master = ChaCha8Rng::seed_from_u64(config.train.seed);
        let shape = config.image_shape();
        let generator = Generator::init(config.generator.clone(), master.next_u64())?;
        let discriminator = Discriminator::init(config.discriminator.clone(), shape, master.next_u64())?;
        let classifier = TaskClassifier::init(config.classifier.clone(), shape, master.next_u64())?;
        let bs = config.train.batch_size;
        let source_iter = BatchIterator::new(data.source.len(), bs, master.next_u64(), None)?;
        let target_iter = BatchIterator::new(data.target.len(), bs, master.next_u64(), None)?;
        let labeled_seed = master.next_u64();
        let labeled_iter = data.labeled_target.map(|l| BatchIterator::new(l.len(), bs, labeled_seed, None)).transpose()?;
        let rng = ChaCha8Rng::seed_from_u64(master.next_u64());
        Ok(Trainer {
            opt_g: Adam::new(&generator.params),
            opt_d: Adam::new(&discriminator.params),
            opt_t: Adam::new(&classifier.params),
            config,
            generator,
            discriminator,
            classifier,
            step: 0,
            rng,
            source_iter,
            target_iter,
            labeled_iter,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.config.total_iterations()
    }

    fn lr(&self) -> f64 {
        let t = &self.config.train;
        lr_schedule(t.learning_rate, t.decay_factor, t.decay_interval, self.step)
    }

    /// Stream used to classify target-domain images: the generated-stream stack whenever it
    /// receives training signal, the source stack otherwise.
    pub fn eval_stream(&self) -> Stream {
        self.config.target_stream(self.labeled_iter.is_some())
    }

    fn noise(&mut self, batch: usize) -> pixelda_tensor::Tensor<f32> {
        sample_noise(batch, self.config.generator.noise_dim, &mut self.rng)
    }

    /// Updates θ_D and θ_T on one source/target batch pair with θ_G fixed.
    pub fn d_step(&mut self, xs: &Batch, xt: &Batch, xl: Option<&Batch>) -> Result<Vec<LossRecord>> {
        #[cfg(debug_assertions)]
        let g_before = self.generator.params.clone();
        let w = self.config.loss.clone();
        let mut tape = Tape::new();
        let gb = self.generator.params.bind(&mut tape, false)?;
        let db = self.discriminator.params.bind(&mut tape, true)?;
        let tb = self.classifier.params.bind(&mut tape, true)?;
        let xs_v = tape.constant(xs.images.clone())?;
        let need_fake = w.alpha > 0.0 || (w.beta > 0.0 && w.train_t_on_adapted);
        let x_f = if need_fake {
            let z = self.noise(xs.len());
            let zv = tape.constant(z)?;
            Some(self.generator.forward(&mut tape, &gb, xs_v, zv, Mode::Train)?.0)
        } else {
            None
        };
        let mut terms = LossTerms::default();
        if w.alpha > 0.0 {
            let xt_v = tape.constant(xt.images.clone())?;
            let d_real = self.discriminator.forward(&mut tape, &db, xt_v, Mode::Train, &mut self.rng)?;
            let d_fake = self.discriminator.forward(&mut tape, &db, x_f.unwrap(), Mode::Train, &mut self.rng)?;
            terms.domain = Some(domain_loss(&mut tape, d_real, d_fake)?);
        }
        if w.beta > 0.0 {
            let onehot = xs.onehot.as_ref().ok_or_else(|| Error::Unlabeled("source".into()))?;
            let src = if w.train_t_on_source {
                Some(self.classifier.forward(&mut tape, &tb, xs_v, Stream::Source, Mode::Train)?)
            } else {
                None
            };
            let adapted = if w.train_t_on_adapted {
                Some(self.classifier.forward(&mut tape, &tb, x_f.unwrap(), Stream::Generated, Mode::Train)?)
            } else {
                None
            };
            let mut task = task_loss(&mut tape, src.as_ref(), adapted.as_ref(), onehot, xs.poses.as_ref(), w.xi)?;
            if let Some(xl) = xl {
                task = Some(self.labeled_target_loss(&mut tape, &tb, xl, task)?);
            }
            terms.task = task;
        }
        let obj = combined_objective(&mut tape, &terms, &w, Phase::DStep)?;
        let grads = tape.backward(obj)?;
        let lr = self.lr();
        let wd = self.config.train.weight_decay;
        self.discriminator.params.zero_grad();
        self.discriminator.params.accumulate(&db, &grads);
        self.classifier.params.zero_grad();
        self.classifier.params.accumulate(&tb, &grads);
        // A network outside the objective is left alone: weight decay alone would
        // still drag it toward zero through the Adam moments.
        if w.alpha > 0.0 {
            self.opt_d.apply(&mut self.discriminator.params, lr, wd)?;
        }
        if w.beta > 0.0 {
            self.opt_t.apply(&mut self.classifier.params, lr, wd)?;
        }
        #[cfg(debug_assertions)]
        assert!(g_before == self.generator.params, "d_step changed generator parameters");
        let mut out = vec![LossRecord { step: self.step, name: "d_objective", value: tape.value(obj).item() as f64 }];
        if let Some(v) = scalar(&tape, terms.domain) {
            out.push(LossRecord { step: self.step, name: "domain", value: v });
        }
        if let Some(v) = scalar(&tape, terms.task) {
            out.push(LossRecord { step: self.step, name: "task", value: v });
        }
        Ok(out)
    }

    fn labeled_target_loss(&self, tape: &mut Tape<f32>, tb: &Bound, xl: &Batch, task: Option<Var>) -> Result<Var> {
        let onehot = xl.onehot.as_ref().ok_or_else(|| Error::Unlabeled("labeled target".into()))?;
        let xv = tape.constant(xl.images.clone())?;
        let out = self.classifier.forward(tape, tb, xv, Stream::Generated, Mode::Train)?;
        let l = task_stream_loss(tape, &out, onehot, xl.poses.as_ref(), self.config.loss.xi)?;
        Ok(match task {
            Some(t) => tape.add(t, l)?,
            None => l,
        })
    }

    /// Updates θ_G on one source batch with θ_D and θ_T fixed.
    pub fn g_step(&mut self, xs: &Batch) -> Result<Vec<LossRecord>> {
        #[cfg(debug_assertions)]
        let (d_before, t_before) = (self.discriminator.params.clone(), self.classifier.params.clone());
        let w = self.config.loss.clone();
        let mut tape = Tape::new();
        let gb = self.generator.params.bind(&mut tape, true)?;
        let db = self.discriminator.params.bind(&mut tape, false)?;
        let tb = self.classifier.params.bind(&mut tape, false)?;
        let xs_v = tape.constant(xs.images.clone())?;
        let z = self.noise(xs.len());
        let zv = tape.constant(z)?;
        let (x_f, updates) = self.generator.forward(&mut tape, &gb, xs_v, zv, Mode::Train)?;
        let mut terms = LossTerms::default();
        if w.generator_weight > 0.0 {
            let d_fake = self.discriminator.forward(&mut tape, &db, x_f, Mode::Train, &mut self.rng)?;
            terms.generator = Some(generator_adversarial_loss(&mut tape, d_fake, w.nonsaturating_generator)?);
        }
        // An untrained T carries no class information, so the term needs T to be learning.
        if w.task_weight_in_g_step > 0.0 && w.trains_task() {
            let onehot = xs.onehot.as_ref().ok_or_else(|| Error::Unlabeled("source".into()))?;
            let out = self.classifier.forward(&mut tape, &tb, x_f, Stream::Generated, Mode::Train)?;
            terms.task = Some(task_stream_loss(&mut tape, &out, onehot, xs.poses.as_ref(), w.xi)?);
        }
        if w.gamma > 0.0 {
            let masks = xs.masks.as_ref().ok_or_else(|| Error::Invalid("content loss needs masks".into()))?;
            terms.content = Some(masked_pmse(&mut tape, xs_v, x_f, masks)?);
        }
        let obj = combined_objective(&mut tape, &terms, &w, Phase::GStep)?;
        let grads = tape.backward(obj)?;
        self.generator.params.zero_grad();
        self.generator.params.accumulate(&gb, &grads);
        let lr = self.lr();
        self.opt_g.apply(&mut self.generator.params, lr, self.config.train.weight_decay)?;
        self.generator.commit(&updates);
        #[cfg(debug_assertions)]
        assert!(
            d_before == self.discriminator.params && t_before == self.classifier.params,
            "g_step changed discriminator or classifier parameters"
        );
        let mut out = vec![LossRecord { step: self.step, name: "g_objective", value: tape.value(obj).item() as f64 }];
        for (name, v) in [("generator", terms.generator), ("g_task", terms.task), ("content", terms.content)] {
            if let Some(v) = scalar(&tape, v) {
                out.push(LossRecord { step: self.step, name, value: v });
            }
        }
        Ok(out)
    }

    /// Trains θ_T alone on adapted images from the frozen (eval-mode) generator.
    pub fn task_step(&mut self, xs: &Batch, xl: Option<&Batch>) -> Result<Vec<LossRecord>> {
        let x_f = {
            let z = self.noise(xs.len());
            self.generator.generate(&xs.images, &z)?
        };
        let w = self.config.loss.clone();
        let mut tape = Tape::new();
        let tb = self.classifier.params.bind(&mut tape, true)?;
        let onehot = xs.onehot.as_ref().ok_or_else(|| Error::Unlabeled("source".into()))?;
        let xf_v = tape.constant(x_f)?;
        let out = self.classifier.forward(&mut tape, &tb, xf_v, Stream::Generated, Mode::Train)?;
        let mut task = task_stream_loss(&mut tape, &out, onehot, xs.poses.as_ref(), w.xi)?;
        if let Some(xl) = xl {
            task = self.labeled_target_loss(&mut tape, &tb, xl, Some(task))?;
        }
        let grads = tape.backward(task)?;
        self.classifier.params.zero_grad();
        self.classifier.params.accumulate(&tb, &grads);
        let lr = self.lr();
        self.opt_t.apply(&mut self.classifier.params, lr, self.config.train.weight_decay)?;
        Ok(vec![LossRecord { step: self.step, name: "task_only", value: tape.value(task).item() as f64 }])
    }

    /// One iteration: D step then G step during adversarial training, a T-only step afterwards.
    pub fn train_step(&mut self, data: &TrainData) -> Result<Vec<LossRecord>> {
        let step = self.step;
        let xs: Batch = self.source_iter.next_batch(data.source)?.expect("endless iterator");
        let xl: Option<Batch> = match (&mut self.labeled_iter, data.labeled_target) {
            (Some(it), Some(ds)) => it.next_batch(ds)?,
            _ => None,
        };
        let records = if step < self.config.train.total_steps {
            let xt: Batch = self.target_iter.next_batch(data.target)?.expect("endless iterator");
            let mut r = self.d_step(&xs, &xt, xl.as_ref()).map_err(diverged(step, "d_step"))?;
            r.extend(self.g_step(&xs).map_err(diverged(step, "g_step"))?);
            r
        } else {
            self.task_step(&xs, xl.as_ref()).map_err(diverged(step, "task_step"))?
        };
        self.step += 1;
        Ok(records)
    }

    /// Snapshot of everything needed to continue the run bit-exactly.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut params = IndexMap::new();
        let mut optimizer = IndexMap::new();
        let mut optimizer_steps = IndexMap::new();
        let nets: [(&str, &ParamSet, &Adam); 3] = [
            ("generator", &self.generator.params, &self.opt_g),
            ("discriminator", &self.discriminator.params, &self.opt_d),
            ("classifier", &self.classifier.params, &self.opt_t),
        ];
        for (net, ps, opt) in nets {
            for (i, p) in ps.iter().enumerate() {
                params.insert(p.name.clone(), p.value.clone());
                if p.kind == ParamKind::Trainable {
                    optimizer.insert(format!("adam/{net}/m/{}", p.name), opt.m[i].clone());
                    optimizer.insert(format!("adam/{net}/v/{}", p.name), opt.v[i].clone());
                }
            }
            optimizer_steps.insert(format!("adam/{net}"), opt.step);
        }
        let mut iterators = vec![self.source_iter.state(), self.target_iter.state()];
        if let Some(l) = &self.labeled_iter {
            iterators.push(l.state());
        }
        Checkpoint {
            step: self.step,
            params,
            optimizer,
            optimizer_steps,
            rng: RngState { seed: self.rng.get_seed(), stream: self.rng.get_stream(), word_pos: self.rng.get_word_pos() },
            iterators,
        }
    }

    /// Rebuilds a trainer for `config` and replaces its state with `ckpt`.
    pub fn from_checkpoint(config: ExperimentConfig, data: &TrainData, ckpt: &Checkpoint) -> Result<Self> {
        let mut tr = Trainer::new(config, data)?;
        tr.restore(ckpt)?;
        Ok(tr)
    }

    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let mut by_net: [IndexMap<String, _>; 3] = Default::default();
        for (name, t) in &ckpt.params {
            let slot = match name.split('/').next() {
                Some("generator") => 0,
                Some("discriminator") => 1,
                Some("classifier") => 2,
                _ => return Err(Error::Invalid(format!("checkpoint entry {name} belongs to no network"))),
            };
            by_net[slot].insert(name.clone(), t.clone());
        }
        let [g, d, t] = by_net;
        self.generator.params.load_values(g)?;
        self.discriminator.params.load_values(d)?;
        self.classifier.params.load_values(t)?;
        let nets: [(&str, &ParamSet, &mut Adam); 3] = [
            ("generator", &self.generator.params, &mut self.opt_g),
            ("discriminator", &self.discriminator.params, &mut self.opt_d),
            ("classifier", &self.classifier.params, &mut self.opt_t),
        ];
        let mut used = 0;
        for (net, ps, opt) in nets {
            for (i, p) in ps.iter().enumerate() {
                if p.kind != ParamKind::Trainable {
                    continue;
                }
                for (moment, slot) in [("m", &mut opt.m[i]), ("v", &mut opt.v[i])] {
                    let key = format!("adam/{net}/{moment}/{}", p.name);
                    let t = ckpt.optimizer.get(&key).ok_or_else(|| Error::Invalid(format!("checkpoint lacks {key}")))?;
                    if t.shape() != p.value.shape() {
                        return Err(Error::Invalid(format!("{key}: shape {:?} vs {:?}", t.shape(), p.value.shape())));
                    }
                    *slot = t.clone();
                    used += 1;
                }
            }
            opt.step = *ckpt
                .optimizer_steps
                .get(&format!("adam/{net}"))
                .ok_or_else(|| Error::Invalid(format!("checkpoint lacks adam/{net} step")))?;
        }
        if used != ckpt.optimizer.len() {
            return Err(Error::Invalid("checkpoint has optimizer entries for unknown parameters".into()));
        }
        let want = 2 + usize::from(self.labeled_iter.is_some());
        if ckpt.iterators.len() != want {
            return Err(Error::Invalid(format!("checkpoint has {} data cursors, run needs {want}", ckpt.iterators.len())));
        }
        self.source_iter.restore(ckpt.iterators[0])?;
        self.target_iter.restore(ckpt.iterators[1])?;
        if let Some(l) = &mut self.labeled_iter {
            l.restore(ckpt.iterators[2])?;
        }
        let mut rng = ChaCha8Rng::from_seed(ckpt.rng.seed);
        rng.set_stream(ckpt.rng.stream);
        rng.set_word_pos(ckpt.rng.word_pos);
        self.rng = rng;
        self.step = ckpt.step;
        Ok(())
    }

    /// Three-row grid: source images, adapted images, real target images.
    pub fn sample_grid(&self, data: &TrainData, count: usize, seed: u64) -> Result<GridImage> {
        let count = count.min(data.source.len()).min(data.target.len()).max(1);
        let idx: Vec<usize> = (0..count).collect();
        let xs: Batch = Batch::from_dataset(data.source, &idx)?;
        let xt: Batch = Batch::from_dataset(data.target, &idx)?;
        let z = sample_noise(count, self.config.generator.noise_dim, &mut ChaCha8Rng::seed_from_u64(seed));
        let xf = self.generator.generate(&xs.images, &z)?;
        let pc = data.source.get(0).pixels.channels;
        let row = |t: &pixelda_tensor::Tensor<f32>| -> Result<Vec<Tile>> {
            Ok(images_from_tensor(t, pc)?.into_iter().map(|(image, depth)| Tile { image, depth }).collect())
        };
        GridImage::new(vec![row(&xs.images)?, row(&xf)?, row(&xt.images)?])
    }
}

/// Where and how often [`run_training`] writes artifacts.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.pxda";
pub const LOSS_FILE: &str = "losses.csv";

/// Loss rows recorded at the logging interval.
#[derive(Debug, Default)]
pub struct TrainSummary {
    pub losses: Vec<LossRecord>,
}

fn write_loss_rows(path: &Path, rows: &[LossRecord], append: bool) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(io_err(path))?;
    let mut buf = String::new();
    if !append {
        buf.push_str("step,loss_name,value\n");
    }
    for r in rows {
        buf.push_str(&format!("{},{},{:?}\n", r.step, r.name, r.value));
    }
    f.write_all(buf.as_bytes()).map_err(io_err(path))
}

/// Keeps only rows logged before `step`, so a resumed run rewrites what follows.
fn truncate_loss_log(path: &Path, step: u64) -> Result<()> {
    let Ok(text) = fs::read_to_string(path) else { return Ok(()) };
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0 || line.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s < step);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Runs the remaining iterations of `trainer`. With an output directory it writes the loss
/// CSV, periodic and final checkpoints and sample grids. A divergence stops the run and
/// leaves the last good checkpoint on disk.
pub fn run_training(trainer: &mut Trainer, data: &TrainData, opts: &RunOptions) -> Result<TrainSummary> {
    let cfg = trainer.config.train.clone();
    let total = trainer.config.total_iterations();
    let mut summary = TrainSummary::default();
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let log = dir.join(LOSS_FILE);
        if trainer.step() == 0 {
            write_loss_rows(&log, &[], false)?;
        } else {
            truncate_loss_log(&log, trainer.step())?;
        }
        if trainer.step() == 0 {
            trainer.checkpoint().save(dir.join(CHECKPOINT_FILE))?;
        }
    }
    while trainer.step() < total {
        let step = trainer.step();
        let records = match trainer.train_step(data) {
            Ok(r) => r,
            Err(e @ Error::Diverged { .. }) => {
                if let Some(dir) = &opts.out_dir {
                    let p = dir.join("divergence.txt");
                    fs::write(&p, format!("{e}\n")).map_err(io_err(&p))?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let logged = step % cfg.log_interval == 0 || step + 1 == total;
        if logged {
            if let Some(dir) = &opts.out_dir {
                write_loss_rows(&dir.join(LOSS_FILE), &records, true)?;
            }
            summary.losses.extend(records);
        }
        if let Some(dir) = &opts.out_dir {
            let done = trainer.step();
            if cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0 && done < total {
                trainer.checkpoint().save(dir.join(CHECKPOINT_FILE))?;
            }
            if cfg.sample_interval > 0 && done % cfg.sample_interval == 0 {
                let samples = dir.join("samples");
                fs::create_dir_all(&samples).map_err(io_err(&samples))?;
                trainer.sample_grid(data, 8, cfg.seed)?.save(samples.join(format!("step_{done:07}.ppm")))?;
            }
        }
    }
    if let Some(dir) = &opts.out_dir {
        trainer.checkpoint().save(dir.join(CHECKPOINT_FILE))?;
    }
    Ok(summary)
}
