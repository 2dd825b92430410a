//! Metrics and analysis protocols: accuracy and angle error, nearest-neighbor memorization
//! audit, classifier-only baselines, multi-seed stability and the unseen-class protocol.

pub mod grid;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use pixelda_tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{images_from_tensor, normalize, normalize_depth, sample_noise, Batch, BatchIterator, Dataset, LabeledImage};
use crate::error::{io_err, Error, Result};
use crate::losses::{task_stream_loss, LossWeights};
use crate::models::{Generator, Mode, Stream, TaskClassifier};
use crate::quaternion::{quaternion_angle, Quaternion};
use crate::trainer::{lr_schedule, run_training, Adam, ExperimentConfig, RunOptions, TrainData, Trainer};
use grid::{GridImage, Tile};

const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassStats {
    pub correct: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Percent correct, in `[0, 100]`.
    pub accuracy: f64,
    /// Degrees, in `[0, 180]`; present when the dataset has poses and T a pose head.
    pub mean_angle_error: Option<f64>,
    pub per_class: Vec<ClassStats>,
    pub count: usize,
    pub fingerprint: u64,
    pub seed: u64,
}

/// FNV-1a hash of the configuration's debug rendering.
pub fn config_fingerprint(config: &ExperimentConfig) -> u64 {
    format!("{config:?}").bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl MetricsReport {
    /// Stamps the report with the run's configuration fingerprint and seed.
    pub fn tagged(mut self, config: &ExperimentConfig) -> Self {
        self.fingerprint = config_fingerprint(config);
        self.seed = config.train.seed;
        self
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "samples: {}", self.count);
        let _ = writeln!(s, "accuracy: {:.2}%", self.accuracy);
        if let Some(a) = self.mean_angle_error {
            let _ = writeln!(s, "mean angle error: {a:.2} deg");
        }
        for (k, c) in self.per_class.iter().enumerate().filter(|(_, c)| c.total > 0) {
            let _ = writeln!(s, "  class {k}: {}/{}", c.correct, c.total);
        }
        let _ = writeln!(s, "seed: {}  config: {:016x}", self.seed, self.fingerprint);
        s
    }

    /// `metric,value` rows followed by one row per class.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut rows = vec![
            ("count".to_string(), self.count.to_string()),
            ("accuracy".into(), format!("{:?}", self.accuracy)),
            ("seed".into(), self.seed.to_string()),
            ("fingerprint".into(), format!("{:016x}", self.fingerprint)),
        ];
        if let Some(a) = self.mean_angle_error {
            rows.push(("mean_angle_error".into(), format!("{a:?}")));
        }
        for (k, c) in self.per_class.iter().enumerate() {
            rows.push((format!("class_{k}"), format!("{}/{}", c.correct, c.total)));
        }
        w.write_record(["metric", "value"]).map_err(|e| csv_err(path, e))?;
        for (m, v) in rows {
            w.write_record([m, v]).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(io_err(path))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io { path: path.to_path_buf(), source },
        other => Error::Format { path: path.to_path_buf(), detail: format!("{other:?}") },
    }
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode accuracy (and mean angle error when poses are available) of `stream` on `ds`.
pub fn evaluate(classifier: &TaskClassifier, ds: &Dataset, stream: Stream) -> Result<MetricsReport> {
    if ds.is_empty() {
        return Err(Error::Invalid(format!("cannot evaluate on empty split '{}'", ds.split)));
    }
    ds.require_labels()?;
    let k = classifier.config.class_count;
    let mut per_class = vec![ClassStats::default(); k.max(ds.class_count)];
    let with_pose = classifier.has_pose_head() && ds.has_poses();
    let mut angle_sum = 0.0;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let batch: Batch = Batch::from_dataset(ds, chunk)?;
        let (probs, poses) = classifier.classify(&batch.images, stream)?;
        for (j, &i) in chunk.iter().enumerate() {
            let label = ds.label(i).expect("labeled");
            let pred = argmax(&probs.data()[j * k..(j + 1) * k]);
            let c = &mut per_class[label];
            c.total += 1;
            c.correct += usize::from(pred == label);
            if with_pose {
                let p = poses.as_ref().expect("pose head");
                let q_hat: Vec<f64> = p.data()[j * 4..j * 4 + 4].iter().map(|&v| v as f64).collect();
                let q = ds.get(i).pose.expect("pose");
                angle_sum += quaternion_angle(q.canonical(), Quaternion::from_slice(&q_hat).canonical())?;
            }
        }
    }
    let correct: usize = per_class.iter().map(|c| c.correct).sum();
    Ok(MetricsReport {
        accuracy: 100.0 * correct as f64 / ds.len() as f64,
        mean_angle_error: with_pose.then(|| angle_sum / ds.len() as f64),
        per_class,
        count: ds.len(),
        fingerprint: 0,
        seed: 0,
    })
}

fn item_from_pixels(src: &LabeledImage, image: crate::data::Image, depth: Option<Vec<u16>>) -> LabeledImage {
    LabeledImage { pixels: image, label: src.label, pose: src.pose, mask: src.mask.clone(), depth }
}

/// Runs every image of `ds` through the eval-mode generator with fresh noise per image.
/// Labels, poses and masks are carried over.
pub fn adapt_dataset(generator: &Generator, ds: &Dataset, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(ds.len());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let batch: Batch = Batch::from_dataset(ds, chunk)?;
        let z = sample_noise(chunk.len(), generator.config.noise_dim, &mut rng);
        let out = generator.generate(&batch.images, &z)?;
        let pc = ds.get(chunk[0]).pixels.channels;
        for (&i, (image, depth)) in chunk.iter().zip(images_from_tensor(&out, pc)?) {
            items.push(item_from_pixels(ds.get(i), image, depth));
        }
    }
    let split = format!("{}-adapted", ds.split);
    if ds.is_labeled() {
        Dataset::labeled(split, ds.domain, ds.class_count, items)
    } else {
        Dataset::unlabeled(split, ds.domain, ds.class_count, items)
    }
}

/// Normalized pixel vector (channel-major, depth last) used for pixel-space distances.
pub fn pixel_vector(item: &LabeledImage) -> Vec<f64> {
    let px = &item.pixels;
    let plane = px.height * px.width;
    let mut v = Vec::with_capacity(plane * item.tensor_channels());
    for c in 0..px.channels {
        v.extend((0..plane).map(|p| normalize(px.data[p * px.channels + c])));
    }
    if let Some(d) = &item.depth {
        v.extend(d.iter().map(|&x| normalize_depth(x)));
    }
    v
}

/// Exact nearest target (L2) for every query: `(target index, distance)`. Ties keep the
/// lowest target index.
pub fn nn_search(queries: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<Vec<(usize, f64)>> {
    if targets.is_empty() {
        return Err(Error::Invalid("nearest-neighbor search over an empty target set".into()));
    }
    let n = targets[0].len();
    if let Some(bad) = queries.iter().chain(targets).find(|v| v.len() != n) {
        return Err(Error::Invalid(format!("image of {} values compared with images of {n}", bad.len())));
    }
    Ok(queries
        .iter()
        .map(|q| {
            let mut best = (0, f64::INFINITY);
            for (j, t) in targets.iter().enumerate() {
                let d2: f64 = q.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
                if d2 < best.1 {
                    best = (j, d2);
                }
            }
            (best.0, best.1.sqrt())
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditMatch {
    pub query: usize,
    pub target: usize,
    pub distance: f64,
}

#[derive(Debug, Clone)]
pub struct AuditReport {
    pub matches: Vec<AuditMatch>,
    /// Rows: source, generated, nearest target.
    pub grid: GridImage,
}

impl AuditReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["generated_index", "target_index", "l2_distance"]).map_err(|e| csv_err(path, e))?;
        for m in &self.matches {
            w.write_record([m.query.to_string(), m.target.to_string(), format!("{:?}", m.distance)])
                .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(io_err(path))
    }
}

fn tile(item: &LabeledImage) -> Tile {
    Tile { image: item.pixels.clone(), depth: item.depth.clone() }
}

/// Audit of already generated images: each is matched against the whole target set.
pub fn audit_images(sources: &[LabeledImage], generated: &[LabeledImage], target: &Dataset) -> Result<AuditReport> {
    if sources.len() != generated.len() || generated.is_empty() {
        return Err(Error::Invalid(format!("{} sources for {} generated images", sources.len(), generated.len())));
    }
    let shape = |it: &LabeledImage| [it.tensor_channels(), it.pixels.height, it.pixels.width];
    let want = target.image_shape().ok_or_else(|| Error::Invalid("audit against an empty target set".into()))?;
    if let Some(bad) = generated.iter().map(shape).find(|&s| s != want) {
        return Err(Error::Invalid(format!("generated images {bad:?} vs target images {want:?}")));
    }
    let queries: Vec<Vec<f64>> = generated.iter().map(pixel_vector).collect();
    let targets: Vec<Vec<f64>> = target.items().iter().map(pixel_vector).collect();
    let found = nn_search(&queries, &targets)?;
    let matches: Vec<AuditMatch> =
        found.iter().enumerate().map(|(query, &(target, distance))| AuditMatch { query, target, distance }).collect();
    let grid = GridImage::new(vec![
        sources.iter().map(tile).collect(),
        generated.iter().map(tile).collect(),
        matches.iter().map(|m| tile(target.get(m.target))).collect(),
    ])?;
    Ok(AuditReport { matches, grid })
}

/// Generates `count` adapted images from the first source items and looks up each one's
/// nearest neighbor in the target training set.
pub fn nn_audit(generator: &Generator, source: &Dataset, target: &Dataset, count: usize, seed: u64) -> Result<AuditReport> {
    if count == 0 || count > source.len() {
        return Err(Error::Invalid(format!("audit of {count} samples from a split of {}", source.len())));
    }
    if source.image_shape() != target.image_shape() {
        return Err(Error::Invalid(format!("source {:?} vs target {:?}", source.image_shape(), target.image_shape())));
    }
    let idx: Vec<usize> = (0..count).collect();
    let picked = source.subset(source.split.clone(), &idx);
    let adapted = adapt_dataset(generator, &picked, seed)?;
    audit_images(picked.items(), adapted.items(), target)
}

/// Trains a fresh task network alone. With a generator, T sees its eval-mode output on the
/// generated-images stream; without one, T sees the raw source images on the source stream.
pub fn train_classifier(config: &ExperimentConfig, generator: Option<&Generator>, source: &Dataset, steps: u64, seed: u64) -> Result<TaskClassifier> {
    config.validate()?;
    source.require_labels()?;
    let shape = config.image_shape();
    if source.image_shape() != Some(shape) {
        return Err(Error::Invalid(format!("source images {:?}, configured {shape:?}", source.image_shape())));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut classifier = TaskClassifier::init(config.classifier.clone(), shape, rand::RngCore::next_u64(&mut master))?;
    let mut it = BatchIterator::new(source.len(), config.train.batch_size, rand::RngCore::next_u64(&mut master), None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rand::RngCore::next_u64(&mut master));
    let mut opt = Adam::new(&classifier.params);
    let stream = if generator.is_some() { Stream::Generated } else { Stream::Source };
    let t = &config.train;
    for step in 0..steps {
        let xs: Batch = it.next_batch(source)?.expect("endless iterator");
        let x = match generator {
            Some(g) => g.generate(&xs.images, &sample_noise(xs.len(), g.config.noise_dim, &mut rng))?,
            None => xs.images.clone(),
        };
        let mut tape = Tape::new();
        let tb = classifier.params.bind(&mut tape, true)?;
        let xv = tape.constant(x)?;
        let out = classifier.forward(&mut tape, &tb, xv, stream, Mode::Train)?;
        let onehot = xs.onehot.as_ref().expect("labeled");
        let loss = task_stream_loss(&mut tape, &out, onehot, xs.poses.as_ref(), config.loss.xi)?;
        let grads = tape.backward(loss)?;
        classifier.params.zero_grad();
        classifier.params.accumulate(&tb, &grads);
        let lr = lr_schedule(t.learning_rate, t.decay_factor, t.decay_interval, step);
        opt.apply(&mut classifier.params, lr, t.weight_decay).map_err(|e| match e {
            Error::Diverged { detail, .. } => Error::Diverged { step, phase: "classifier", detail },
            other => other,
        })?;
    }
    Ok(classifier)
}

/// Source-only baseline: T trained on source images for `config.train.total_steps` steps and
/// evaluated on the source stream.
pub fn train_source_only(config: &ExperimentConfig, source: &Dataset) -> Result<TaskClassifier> {
    train_classifier(config, None, source, config.train.total_steps, config.train.seed)
}

/// Which task-loss streams and content loss a configuration enables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossFlags {
    pub task_source: bool,
    pub task_adapted: bool,
    pub content: bool,
}

impl LossFlags {
    pub fn of(w: &LossWeights) -> Self {
        let task = w.beta > 0.0;
        LossFlags { task_source: task && w.train_t_on_source, task_adapted: task && w.train_t_on_adapted, content: w.gamma > 0.0 }
    }

    /// Applies the flags to `w`. Enabled terms keep their weights from `w`; disabled ones are zeroed.
    pub fn apply(self, w: &mut LossWeights) -> Result<()> {
        w.train_t_on_source = self.task_source;
        w.train_t_on_adapted = self.task_adapted;
        if (self.task_source || self.task_adapted) && w.beta == 0.0 {
            return Err(Error::Config("task streams enabled with loss.beta = 0".into()));
        }
        if self.content && w.gamma == 0.0 {
            return Err(Error::Config("content loss enabled with loss.gamma = 0".into()));
        }
        if !self.content {
            w.gamma = 0.0;
        }
        if !self.task_source && !self.task_adapted {
            w.beta = 0.0;
        }
        Ok(())
    }

    /// The four ablation rows: adversarial only, adapted stream, both streams, both plus content.
    pub fn ablation_rows() -> [LossFlags; 4] {
        let f = |task_source, task_adapted, content| LossFlags { task_source, task_adapted, content };
        [f(false, false, false), f(false, true, false), f(true, true, false), f(true, true, true)]
    }

    pub fn label(self) -> String {
        let mark = |b: bool| if b { "+" } else { "-" };
        format!("source{} adapted{} content{}", mark(self.task_source), mark(self.task_adapted), mark(self.content))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub report: MetricsReport,
    /// Divergence message; the report then describes the state at the failing step.
    pub diverged: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub runs: Vec<SeedRun>,
    pub flags: LossFlags,
    /// Population std over all runs.
    pub accuracy_std: f64,
    /// Population std over runs that did not diverge; `None` with fewer than two of them.
    pub accuracy_std_converged: Option<f64>,
    pub angle_std: Option<f64>,
    pub angle_std_converged: Option<f64>,
}

/// Textbook two-pass population standard deviation.
pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

impl StabilityReport {
    fn from_runs(runs: Vec<SeedRun>, flags: LossFlags) -> Self {
        let acc: Vec<f64> = runs.iter().map(|r| r.report.accuracy).collect();
        let acc_ok: Vec<f64> = runs.iter().filter(|r| r.diverged.is_none()).map(|r| r.report.accuracy).collect();
        let angles: Option<Vec<f64>> = runs.iter().map(|r| r.report.mean_angle_error).collect();
        let angles_ok: Option<Vec<f64>> =
            runs.iter().filter(|r| r.diverged.is_none()).map(|r| r.report.mean_angle_error).collect();
        StabilityReport {
            accuracy_std: population_std(&acc),
            accuracy_std_converged: (acc_ok.len() >= 2).then(|| population_std(&acc_ok)),
            angle_std: angles.as_deref().map(population_std),
            angle_std_converged: angles_ok.filter(|a| a.len() >= 2).as_deref().map(population_std),
            runs,
            flags,
        }
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "losses: {}", self.flags.label());
        for r in &self.runs {
            let _ = write!(s, "seed {}: accuracy {:.2}%", r.seed, r.report.accuracy);
            if let Some(a) = r.report.mean_angle_error {
                let _ = write!(s, ", angle {a:.2} deg");
            }
            if let Some(d) = &r.diverged {
                let _ = write!(s, " (diverged: {d})");
            }
            s.push('\n');
        }
        let _ = writeln!(s, "accuracy std: {:.4}", self.accuracy_std);
        if let Some(v) = self.accuracy_std_converged {
            let _ = writeln!(s, "accuracy std without diverged runs: {v:.4}");
        }
        if let Some(v) = self.angle_std {
            let _ = writeln!(s, "angle std: {v:.4}");
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["seed", "accuracy", "mean_angle_error", "diverged"]).map_err(|e| csv_err(path, e))?;
        for r in &self.runs {
            let angle = r.report.mean_angle_error.map(|a| format!("{a:?}")).unwrap_or_default();
            w.write_record([r.seed.to_string(), format!("{:?}", r.report.accuracy), angle, r.diverged.is_some().to_string()])
                .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(io_err(path))
    }
}

/// Trains one model per seed under identical hyperparameters and evaluates each on
/// `eval_set`. Runs execute on up to `available_parallelism` threads; results keep the
/// order of `seeds`.
pub fn stability_study(config: &ExperimentConfig, seeds: &[u64], data: &TrainData, eval_set: &Dataset) -> Result<StabilityReport> {
    if seeds.len() < 2 {
        return Err(Error::Invalid(format!("stability study needs at least 2 seeds, got {}", seeds.len())));
    }
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Invalid("stability study seeds must be distinct".into()));
    }
    config.validate()?;
    data.validate(config)?;
    eval_set.require_labels()?;
    let run = |seed: u64| -> Result<SeedRun> {
        let mut cfg = config.clone();
        cfg.train.seed = seed;
        let mut trainer = Trainer::new(cfg.clone(), data)?;
        let diverged = match run_training(&mut trainer, data, &RunOptions::default()) {
            Ok(_) => None,
            Err(e @ Error::Diverged { .. }) => Some(e.to_string()),
            Err(e) => return Err(e),
        };
        let report = evaluate(&trainer.classifier, eval_set, trainer.eval_stream())?.tagged(&cfg);
        Ok(SeedRun { seed, report, diverged })
    };
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(seeds.len());
    let mut runs = Vec::with_capacity(seeds.len());
    for chunk in seeds.chunks(workers) {
        let results: Vec<Result<SeedRun>> = if workers == 1 {
            chunk.iter().map(|&s| run(s)).collect()
        } else {
            std::thread::scope(|sc| {
                let handles: Vec<_> = chunk.iter().map(|&s| sc.spawn(move || run(s))).collect();
                handles.into_iter().map(|h| h.join().expect("stability worker panicked")).collect()
            })
        };
        for r in results {
            runs.push(r?);
        }
    }
    Ok(StabilityReport::from_runs(runs, LossFlags::of(&config.loss)))
}

/// Metrics of the unseen-class protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct UnseenClassReport {
    /// Target test samples of the held-out classes.
    pub held_out: MetricsReport,
    /// The full target test set.
    pub full: MetricsReport,
}

/// Trains G and D on the retained classes only, freezes G, trains a fresh T on the adapted
/// full source set and evaluates it on held-out-class and full target test data. The target
/// training split must be labeled so its classes can be filtered; labels are not used otherwise.
pub fn unseen_class_protocol(
    config: &ExperimentConfig,
    source: &Dataset,
    target: &Dataset,
    target_test: &Dataset,
    held_out: &[usize],
) -> Result<UnseenClassReport> {
    let k = source.class_count;
    if held_out.is_empty() || held_out.len() >= k {
        return Err(Error::Invalid(format!("held-out classes must be a nonempty proper subset of {k}")));
    }
    if let Some(&c) = held_out.iter().find(|&&c| c >= k) {
        return Err(Error::Invalid(format!("class {c} does not exist ({k} classes)")));
    }
    target.require_labels()?;
    target_test.require_labels()?;
    for (name, ds) in [("source", source), ("target", target), ("target test", target_test)] {
        for &c in held_out {
            if !(0..ds.len()).any(|i| ds.label(i) == Some(c)) {
                return Err(Error::Invalid(format!("class {c} absent from the {name} split")));
            }
        }
    }
    let kept = |c: usize| !held_out.contains(&c);
    let src_kept = source.filter_classes("source-retained", kept)?;
    let tgt_kept = target.filter_classes("target-retained", kept)?;
    let tgt_kept = Dataset::unlabeled("target-retained", tgt_kept.domain, tgt_kept.class_count, tgt_kept.into_items())?;
    let mut adv = config.clone();
    adv.loss.train_t_on_source = false;
    adv.loss.train_t_on_adapted = false;
    adv.loss.beta = 0.0;
    adv.train.task_only_steps = 0;
    let data = TrainData { source: &src_kept, target: &tgt_kept, labeled_target: None };
    let mut trainer = Trainer::new(adv.clone(), &data)?;
    while trainer.step() < adv.train.total_steps {
        trainer.train_step(&data)?;
    }
    let classifier = train_classifier(config, Some(&trainer.generator), source, config.train.total_steps, config.train.seed ^ 0x5eed)?;
    let test_held = target_test.filter_classes("target-test-held-out", |c| held_out.contains(&c))?;
    Ok(UnseenClassReport {
        held_out: evaluate(&classifier, &test_held, Stream::Generated)?.tagged(config),
        full: evaluate(&classifier, target_test, Stream::Generated)?.tagged(config),
    })
}

/// Writes a report's CSV and text summary side by side.
pub fn write_report(dir: &Path, stem: &str, report: &MetricsReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    report.write_csv(dir.join(format!("{stem}.csv")))?;
    let p = dir.join(format!("{stem}.txt"));
    fs::write(&p, report.summary()).map_err(io_err(&p))
}

/// Eval-mode pose predictions as quaternions, for callers that want raw outputs.
pub fn predicted_poses(classifier: &TaskClassifier, images: &Tensor<f32>, stream: Stream) -> Result<Vec<Quaternion>> {
    let p = classifier.predict_pose(images, stream)?;
    Ok(p.data().chunks(4).map(|c| Quaternion::new(c[0] as f64, c[1] as f64, c[2] as f64, c[3] as f64)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn std_two_pass() {
        assert_eq!(population_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]), 2.0);
        assert_eq!(population_std(&[3.0, 3.0]), 0.0);
    }

    #[test]
    fn nn_examples() {
        let t = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![3.0, 0.0]];
        let r = nn_search(&[vec![1.0, 1.0], vec![2.9, 0.2], vec![0.5, 0.5]], &t).unwrap();
        assert_eq!(r[0], (1, 0.0));
        assert_eq!(r[1].0, 2);
        // equidistant from targets 0 and 1
        assert_eq!(r[2].0, 0);
        assert_eq!(nn_search(&[vec![9.0, 9.0]], &t[..1]).unwrap()[0].0, 0);
        assert!(nn_search(&[vec![1.0]], &t).is_err());
    }

    #[test]
    fn flags_roundtrip() {
        for f in LossFlags::ablation_rows() {
            let mut w = LossWeights { gamma: 0.5, ..LossWeights::default() };
            f.apply(&mut w).unwrap();
            assert_eq!(LossFlags::of(&w), f);
        }
    }
}
