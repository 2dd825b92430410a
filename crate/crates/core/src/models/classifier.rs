use std::fmt;
use std::str::FromStr;

use pixelda_tensor::{Bound, ParamSet, Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Conv, Dense, Mode};
use crate::error::{Error, Result};

/// One token of a layer spec: `conv<N>[k<K>][s<S>]`, `pool` (2x2 max) or `fc<N>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { filters: usize, kernel: usize, stride: usize },
    Pool,
    Fc(usize),
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad layer token '{s}' (expected conv<N>[k<K>][s<S>], pool or fc<N>)"));
        if s == "pool" {
            return Ok(LayerSpec::Pool);
        }
        if let Some(rest) = s.strip_prefix("fc") {
            let n: usize = rest.parse().map_err(|_| bad())?;
            return if n > 0 { Ok(LayerSpec::Fc(n)) } else { Err(bad()) };
        }
        let rest = s.strip_prefix("conv").ok_or_else(bad)?;
        let (mut filters, mut kernel, mut stride) = (None, 3, 1);
        let mut field = 'n';
        let mut digits = String::new();
        let mut flush = |field: char, digits: &mut String| -> Result<()> {
            let v: usize = digits.parse().map_err(|_| bad())?;
            if v == 0 {
                return Err(bad());
            }
            match field {
                'n' => filters = Some(v),
                'k' => kernel = v,
                _ => stride = v,
            }
            digits.clear();
            Ok(())
        };
        for ch in rest.chars() {
            match ch {
                '0'..='9' => digits.push(ch),
                'k' | 's' => {
                    flush(field, &mut digits)?;
                    field = ch;
                }
                _ => return Err(bad()),
            }
        }
        flush(field, &mut digits)?;
        Ok(LayerSpec::Conv { filters: filters.ok_or_else(bad)?, kernel, stride })
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv { filters, kernel, stride } => {
                write!(f, "conv{filters}")?;
                if kernel != 3 {
                    write!(f, "k{kernel}")?;
                }
                if stride != 1 {
                    write!(f, "s{stride}")?;
                }
                Ok(())
            }
            LayerSpec::Pool => write!(f, "pool"),
            LayerSpec::Fc(n) => write!(f, "fc{n}"),
        }
    }
}

/// Parses a comma- or whitespace-separated layer list.
pub fn parse_layer_spec(spec: &str) -> Result<Vec<LayerSpec>> {
    spec.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty()).map(str::parse).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskClassifierConfig {
    pub class_count: usize,
    pub pose_head: bool,
    /// Layers duplicated per stream (source / generated).
    pub private_layer_spec: String,
    /// Layers shared by both streams, followed by the heads.
    pub shared_layer_spec: String,
}

impl Default for TaskClassifierConfig {
    fn default() -> Self {
        TaskClassifierConfig {
            class_count: 10,
            pose_head: false,
            private_layer_spec: "conv32k5,pool".into(),
            shared_layer_spec: "conv48k5,pool,fc100,fc100".into(),
        }
    }
}

impl TaskClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::Config("classifier.class_count must be >= 2".into()));
        }
        parse_layer_spec(&self.private_layer_spec)?;
        parse_layer_spec(&self.shared_layer_spec)?;
        Ok(())
    }
}

/// Which private front stack an input passes through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Source,
    /// Adapted images and real target images.
    Generated,
}

impl Stream {
    pub fn name(self) -> &'static str {
        match self {
            Stream::Source => "source",
            Stream::Generated => "generated",
        }
    }
}

#[derive(Debug, Clone)]
enum Layer {
    Conv(Conv),
    Pool,
    Fc(Dense),
}

/// Activation shape flowing through a stack: spatial `[c, h, w]` or flat features.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Flow {
    Spatial(usize, usize, usize),
    Flat(usize),
}

impl Flow {
    fn features(self) -> usize {
        match self {
            Flow::Spatial(c, h, w) => c * h * w,
            Flow::Flat(n) => n,
        }
    }
}

fn build_stack<T: Scalar, R: Rng + ?Sized>(
    params: &mut ParamSet<T>,
    prefix: &str,
    specs: &[LayerSpec],
    mut flow: Flow,
    rng: &mut R,
) -> Result<(Vec<Layer>, Flow)> {
    let mut layers = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let name = format!("{prefix}/layer{i}");
        match (*spec, flow) {
            (LayerSpec::Conv { filters, kernel, stride }, Flow::Spatial(c, h, w)) => {
                layers.push(Layer::Conv(Conv::new(params, &name, c, filters, kernel, stride, true, rng)?));
                flow = Flow::Spatial(filters, h.div_ceil(stride), w.div_ceil(stride));
            }
            (LayerSpec::Pool, Flow::Spatial(c, h, w)) => {
                if h < 2 || w < 2 {
                    return Err(Error::Config(format!("{name}: pool on {h}x{w}")));
                }
                layers.push(Layer::Pool);
                flow = Flow::Spatial(c, h / 2, w / 2);
            }
            (LayerSpec::Fc(n), f) => {
                layers.push(Layer::Fc(Dense::new(params, &name, f.features(), n, rng)?));
                flow = Flow::Flat(n);
            }
            (s, Flow::Flat(_)) => return Err(Error::Config(format!("{name}: '{s}' after a fully connected layer"))),
        }
    }
    Ok((layers, flow))
}

fn run_stack<T: Scalar>(tape: &mut Tape<T>, b: &Bound, layers: &[Layer], mut h: Var) -> Result<Var> {
    for layer in layers {
        h = match layer {
            Layer::Conv(c) => {
                let y = c.forward(tape, b, h)?;
                tape.relu(y)?
            }
            Layer::Pool => tape.max_pool2d(h, 2)?,
            Layer::Fc(d) => {
                let h = if tape.value(h).rank() > 2 { tape.flatten(h)? } else { h };
                let y = d.forward(tape, b, h)?;
                tape.relu(y)?
            }
        };
    }
    Ok(h)
}

/// Tape outputs of the task network.
#[derive(Debug, Clone, Copy)]
pub struct TaskOutput {
    pub logits: Var,
    /// Unit quaternion rows `[B, 4]` with nonnegative scalar part.
    pub pose: Option<Var>,
}

/// Task network with per-stream private front layers and shared upper layers.
#[derive(Debug, Clone)]
pub struct TaskClassifier<T: Scalar = f32> {
    pub config: TaskClassifierConfig,
    pub params: ParamSet<T>,
    input: [usize; 3],
    source: Vec<Layer>,
    generated: Vec<Layer>,
    shared: Vec<Layer>,
    logits: Dense,
    pose: Option<Dense>,
}

impl<T: Scalar> TaskClassifier<T> {
    pub fn new<R: Rng + ?Sized>(config: TaskClassifierConfig, input: [usize; 3], rng: &mut R) -> Result<Self> {
        config.validate()?;
        let private = parse_layer_spec(&config.private_layer_spec)?;
        let shared_spec = parse_layer_spec(&config.shared_layer_spec)?;
        let mut params = ParamSet::new();
        let flow = Flow::Spatial(input[0], input[1], input[2]);
        let (source, after) = build_stack(&mut params, "classifier/source", &private, flow, rng)?;
        let (generated, _) = build_stack(&mut params, "classifier/generated", &private, flow, rng)?;
        let (shared, top) = build_stack(&mut params, "classifier/shared", &shared_spec, after, rng)?;
        let logits = Dense::new(&mut params, "classifier/logits", top.features(), config.class_count, rng)?;
        let pose = if config.pose_head {
            Some(Dense::new(&mut params, "classifier/pose", top.features(), 4, rng)?)
        } else {
            None
        };
        Ok(TaskClassifier { config, params, input, source, generated, shared, logits, pose })
    }

    pub fn init(config: TaskClassifierConfig, input: [usize; 3], seed: u64) -> Result<Self> {
        Self::new(config, input, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn cast<U: Scalar>(&self) -> TaskClassifier<U> {
        TaskClassifier {
            config: self.config.clone(),
            params: self.params.cast(),
            input: self.input,
            source: self.source.clone(),
            generated: self.generated.clone(),
            shared: self.shared.clone(),
            logits: self.logits.clone(),
            pose: self.pose.clone(),
        }
    }

    pub fn has_pose_head(&self) -> bool {
        self.pose.is_some()
    }

    pub fn forward(&self, tape: &mut Tape<T>, b: &Bound, x: Var, stream: Stream, _mode: Mode) -> Result<TaskOutput> {
        let shape = tape.value(x).shape();
        if shape.len() != 4 || shape[1..] != self.input {
            return Err(Error::Invalid(format!("classifier configured for {:?}, got {:?}", self.input, shape)));
        }
        let private = match stream {
            Stream::Source => &self.source,
            Stream::Generated => &self.generated,
        };
        let h = run_stack(tape, b, private, x)?;
        let h = run_stack(tape, b, &self.shared, h)?;
        let h = if tape.value(h).rank() > 2 { tape.flatten(h)? } else { h };
        let logits = self.logits.forward(tape, b, h)?;
        let pose = match &self.pose {
            Some(head) => {
                let q = head.forward(tape, b, h)?;
                Some(tape.unit_rows(q)?)
            }
            None => None,
        };
        Ok(TaskOutput { logits, pose })
    }

    /// Eval-mode class probabilities `[B, K]` and, with a pose head, unit quaternions `[B, 4]`.
    pub fn classify(&self, x: &Tensor<T>, stream: Stream) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false)?;
        let xv = tape.constant(x.clone())?;
        let out = self.forward(&mut tape, &b, xv, stream, Mode::Eval)?;
        let probs = tape.softmax(out.logits)?;
        Ok((tape.value(probs).clone(), out.pose.map(|q| tape.value(q).clone())))
    }

    /// Eval-mode pose only; errors without a pose head.
    pub fn predict_pose(&self, x: &Tensor<T>, stream: Stream) -> Result<Tensor<T>> {
        if self.pose.is_none() {
            return Err(Error::Invalid("pose requested from a classifier without a pose head".into()));
        }
        Ok(self.classify(x, stream)?.1.expect("pose head present"))
    }

    /// Copies every private parameter of `from` onto the matching entry of the other stream.
    pub fn copy_private(&mut self, from: Stream) {
        let to = match from {
            Stream::Source => Stream::Generated,
            Stream::Generated => Stream::Source,
        };
        let (src, dst) = (format!("classifier/{}/", from.name()), format!("classifier/{}/", to.name()));
        let pairs: Vec<(String, Tensor<T>)> = self
            .params
            .iter()
            .filter_map(|p| p.name.strip_prefix(&src).map(|rest| (format!("{dst}{rest}"), p.value.clone())))
            .collect();
        for (name, value) in pairs {
            let id = self.params.id_of(&name).expect("mirrored stacks");
            self.params.get_mut(id).value = value;
        }
    }
}
