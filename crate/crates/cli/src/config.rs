//! Run configuration: a named profile, then the TOML file, then `--set` overrides.

use std::path::{Path, PathBuf};

use pixelda_core::data::SynthesisConfig;
use pixelda_core::losses::LossWeights;
use pixelda_core::models::{DiscriminatorConfig, GeneratorConfig, Stream, TaskClassifierConfig};
use pixelda_core::trainer::{ExperimentConfig, TrainConfig};
use pixelda_core::{Error, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const DATA_ROOT_ENV: &str = "PIXELDA_DATA_ROOT";
pub const ECHO_FILE: &str = "config.toml";
pub const PROFILES: [&str; 5] = ["default", "mnistm", "usps", "linemod", "linemod-masked"];

/// Dataset locations. Relative paths resolve against `root`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Falls back to the data-root environment variable.
    pub root: Option<PathBuf>,
    /// Labeled source split: an image directory, or an IDX image file when `source_labels` is set.
    pub source: Option<PathBuf>,
    pub source_labels: Option<PathBuf>,
    /// Target training split, used without labels.
    pub target: Option<PathBuf>,
    pub target_labels: Option<PathBuf>,
    /// Small labeled target split for semi-supervised training.
    pub labeled_target: Option<PathBuf>,
    pub labeled_target_labels: Option<PathBuf>,
    /// Labeled target test split.
    pub test: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub background_dir: PathBuf,
    pub crop_size: usize,
    pub threshold: f64,
    pub seed: u64,
    /// Keep the digit labels on the composites.
    pub labeled: bool,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SynthesisConfig::default();
        SynthSection { background_dir: s.background_dir, crop_size: s.crop_size, threshold: s.threshold, seed: s.seed, labeled: true }
    }
}

/// Command-specific settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Noise seed for `adapt` and `audit`.
    pub adapt_seed: u64,
    pub audit_count: usize,
    /// Stability-study seeds.
    pub seeds: Vec<u64>,
    /// Classifier stream for `eval`; unset picks the stream the run trained for target images.
    pub stream: Option<Stream>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { adapt_seed: 0, audit_count: 8, seeds: vec![0, 1, 2, 3, 4], stream: None }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub classifier: TaskClassifierConfig,
    pub synth: SynthSection,
    pub data: DataSection,
    pub run: RunSection,
}

fn digits_profile(name: &str, channels: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.train.profile = name.into();
    c.generator = GeneratorConfig { image_height: 28, image_width: 28, image_channels: channels, residual_blocks: 6, filters: 64, noise_dim: 10 };
    c.discriminator.base_filters = 64;
    c
}

fn linemod_profile(name: &str) -> RunConfig {
    let mut c = RunConfig::default();
    c.train.profile = name.into();
    c.train.decay_factor = 0.75;
    c.train.decay_interval = 95_000;
    c.generator = GeneratorConfig { image_height: 64, image_width: 64, image_channels: 4, residual_blocks: 4, filters: 64, noise_dim: 10 };
    c.discriminator.dropout_keep = 0.35;
    c.classifier = TaskClassifierConfig {
        class_count: 11,
        pose_head: true,
        private_layer_spec: "conv32k5,pool".into(),
        shared_layer_spec: "conv64k5,pool,fc128".into(),
    };
    c.loss = LossWeights {
        beta: 1.0,
        generator_weight: 0.011,
        task_weight_in_g_step: 0.0,
        train_t_on_source: false,
        train_t_on_adapted: true,
        ..LossWeights::default()
    };
    c
}

/// Baseline values of a named profile.
pub fn profile(name: &str) -> Result<RunConfig> {
    let c = match name {
        "default" => RunConfig::default(),
        "mnistm" => {
            let mut c = digits_profile(name, 3);
            c.train.learning_rate = 1e-3;
            c.loss = LossWeights { alpha: 0.13, generator_weight: 0.011, task_weight_in_g_step: 0.01, ..LossWeights::default() };
            c
        }
        "usps" => {
            let mut c = digits_profile(name, 1);
            c.train.learning_rate = 2e-4;
            c.loss = LossWeights::default();
            c
        }
        "linemod" => {
            let mut c = linemod_profile(name);
            c.train.learning_rate = 2.2e-4;
            c.loss.alpha = 0.004;
            c.loss.xi = 0.2;
            c
        }
        "linemod-masked" => {
            let mut c = linemod_profile(name);
            c.train.learning_rate = 2.6e-4;
            c.loss.alpha = 0.0088;
            c.loss.xi = 0.29;
            c.loss.gamma = 22.9;
            c
        }
        other => return Err(Error::Config(format!("unknown profile '{other}' (known: {})", PROFILES.join(", ")))),
    };
    Ok(c)
}

fn parse_value(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Sets `a.b.c = value` inside `table`, creating intermediate tables.
fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').map(str::trim).collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key '{key}'")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let slot = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = slot.as_table_mut().ok_or_else(|| Error::Config(format!("'{p}' in '{key}' is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn to_table(c: &RunConfig) -> Result<Table> {
    let text = toml::to_string(c).map_err(|e| Error::Config(e.to_string()))?;
    Ok(toml::from_str(&text).expect("serialized config parses"))
}

/// Builds the effective configuration: profile baseline, then the file, then overrides.
/// The profile is `train.profile` as given by the overrides or the file.
pub fn build(file_text: Option<&str>, overrides: &[String]) -> Result<RunConfig> {
    let file: Table = match file_text {
        Some(t) => toml::from_str(t).map_err(|e| Error::Config(e.to_string()))?,
        None => Table::new(),
    };
    let mut over = Table::new();
    for kv in overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("override '{kv}' is not key=value")))?;
        set_path(&mut over, k.trim(), parse_value(v.trim()))?;
    }
    let name_in = |t: &Table| t.get("train").and_then(|s| s.get("profile")).map(|v| v.as_str().map(str::to_string));
    let name = match name_in(&over).or_else(|| name_in(&file)) {
        Some(Some(n)) => n,
        Some(None) => return Err(Error::Config("train.profile must be a string".into())),
        None => "default".into(),
    };
    let mut table = to_table(&profile(&name)?)?;
    merge(&mut table, file);
    merge(&mut table, over);
    let cfg: RunConfig = Table::try_into(table).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|source| Error::Io { path: p.to_path_buf(), source })?),
        None => None,
    };
    build(text.as_deref(), overrides)
}

impl RunConfig {
    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            train: self.train.clone(),
            loss: self.loss.clone(),
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
            classifier: self.classifier.clone(),
        }
    }

    pub fn synthesis(&self) -> SynthesisConfig {
        let s = &self.synth;
        SynthesisConfig { background_dir: self.resolve(&s.background_dir), crop_size: s.crop_size, threshold: s.threshold, seed: s.seed }
    }

    pub fn validate(&self) -> Result<()> {
        self.experiment().validate()?;
        self.synthesis().validate()?;
        // TOML integers are signed 64-bit; larger seeds could not be echoed back.
        let seeds = [self.train.seed, self.synth.seed, self.run.adapt_seed].into_iter().chain(self.run.seeds.iter().copied());
        if seeds.into_iter().any(|s| s > i64::MAX as u64) {
            return Err(Error::Config(format!("seeds must not exceed {}", i64::MAX)));
        }
        if self.run.audit_count == 0 {
            return Err(Error::Config("run.audit_count must be >= 1".into()));
        }
        Ok(())
    }

    /// `path` under the data root (config value, else the environment), unless absolute.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        let root = self.data.root.clone().or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from));
        match root {
            Some(r) if path.is_relative() => r.join(path),
            _ => path.to_path_buf(),
        }
    }

    /// Text written next to every run's outputs; loading it reproduces this configuration.
    pub fn echo(&self) -> Result<String> {
        let mut c = self.clone();
        if c.data.root.is_none() {
            c.data.root = std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from);
        }
        toml::to_string(&c).map_err(|e| Error::Config(e.to_string()))
    }
}
