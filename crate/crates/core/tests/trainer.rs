use pixelda_core::data::*;
use pixelda_core::losses::LossWeights;
use pixelda_core::models::*;
use pixelda_core::trainer::*;
use pixelda_core::Error;
use pixelda_tensor::ParamSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIZE: usize = 8;

fn image(rng: &mut ChaCha8Rng, lo: u8, hi: u8) -> Image {
    Image::new(SIZE, SIZE, 3, (0..SIZE * SIZE * 3).map(|_| rng.random_range(lo..=hi)).collect()).unwrap()
}

struct Toy {
    source: Dataset,
    target: Dataset,
}

/// Dark labeled source with masks, bright unlabeled target.
fn toy(n: usize, seed: u64) -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source = (0..n)
        .map(|i| LabeledImage {
            pixels: image(&mut rng, 0, 100),
            label: Some(i % 3),
            pose: None,
            mask: Some(Mask::new(SIZE, SIZE, (0..SIZE * SIZE).map(|p| u8::from(p % 3 != 0)).collect()).unwrap()),
            depth: None,
        })
        .collect();
    let target = (0..n).map(|_| LabeledImage::new(image(&mut rng, 150, 255), 0)).collect();
    Toy {
        source: Dataset::labeled("s", Domain::Source, 3, source).unwrap(),
        target: Dataset::unlabeled("t", Domain::Target, 3, target).unwrap(),
    }
}

fn config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        train: TrainConfig { total_steps: 6, batch_size: 4, seed, log_interval: 1, learning_rate: 1e-3, ..TrainConfig::default() },
        loss: LossWeights { gamma: 0.1, ..LossWeights::default() },
        generator: GeneratorConfig { image_height: SIZE, image_width: SIZE, image_channels: 3, residual_blocks: 1, filters: 4, noise_dim: 3 },
        discriminator: DiscriminatorConfig { base_filters: 4, ..DiscriminatorConfig::default() },
        classifier: TaskClassifierConfig {
            class_count: 3,
            pose_head: false,
            private_layer_spec: "conv4".into(),
            shared_layer_spec: "fc8".into(),
        },
    }
}

fn data(t: &Toy) -> TrainData<'_> {
    TrainData { source: &t.source, target: &t.target, labeled_target: None }
}

fn batch(ds: &Dataset, from: usize) -> Batch {
    Batch::from_dataset(ds, &(from..from + 4).collect::<Vec<_>>()).unwrap()
}

fn trainable_values(p: &ParamSet) -> Vec<Vec<f32>> {
    p.trainable().map(|p| p.value.data().to_vec()).collect()
}

#[test]
fn steps_touch_only_their_networks() {
    let t = toy(8, 0);
    let mut tr = Trainer::new(config(1), &data(&t)).unwrap();
    let (g0, d0, c0) = (tr.generator.params.clone(), tr.discriminator.params.clone(), tr.classifier.params.clone());
    tr.d_step(&batch(&t.source, 0), &batch(&t.target, 0), None).unwrap();
    assert_eq!(tr.generator.params, g0);
    assert_ne!(trainable_values(&tr.discriminator.params), trainable_values(&d0));
    assert_ne!(trainable_values(&tr.classifier.params), trainable_values(&c0));
    let (d1, c1) = (tr.discriminator.params.clone(), tr.classifier.params.clone());
    tr.g_step(&batch(&t.source, 0)).unwrap();
    assert_eq!(tr.discriminator.params, d1);
    assert_eq!(tr.classifier.params, c1);
    assert_ne!(trainable_values(&tr.generator.params), trainable_values(&g0));
}

#[test]
fn zero_weights_change_nothing_but_decay() {
    let t = toy(8, 0);
    let mut cfg = config(2);
    cfg.loss = LossWeights { alpha: 0.0, beta: 0.0, gamma: 0.0, generator_weight: 0.0, task_weight_in_g_step: 0.0, ..LossWeights::default() };
    cfg.train.weight_decay = 0.0;
    let mut tr = Trainer::new(cfg.clone(), &data(&t)).unwrap();
    let before = tr.checkpoint().params;
    tr.d_step(&batch(&t.source, 0), &batch(&t.target, 0), None).unwrap();
    tr.g_step(&batch(&t.source, 0)).unwrap();
    let after = tr.checkpoint().params;
    for (name, v) in &before {
        if !name.contains("moving_") {
            assert_eq!(v, &after[name], "{name}");
        }
    }

    cfg.train.weight_decay = 1e-2;
    let mut tr = Trainer::new(cfg.clone(), &data(&t)).unwrap();
    let (g0, d0, c0) = (tr.generator.params.clone(), tr.discriminator.params.clone(), tr.classifier.params.clone());
    tr.d_step(&batch(&t.source, 0), &batch(&t.target, 0), None).unwrap();
    assert_eq!(tr.discriminator.params, d0);
    assert_eq!(tr.classifier.params, c0);
    tr.g_step(&batch(&t.source, 0)).unwrap();
    for (p0, p1) in g0.trainable().zip(tr.generator.params.trainable()) {
        for (&a, &b) in p0.value.data().iter().zip(p1.value.data()) {
            let (mut m, mut v) = (0.0, 0.0);
            let want = adam_update(a as f64, 0.0, &mut m, &mut v, 1, cfg.train.learning_rate, 1e-2);
            assert!((b as f64 - want).abs() < 1e-7, "{}: {b} vs {want}", p0.name);
        }
    }
}

#[test]
fn weight_decay_shrinks_norms() {
    let t = toy(8, 0);
    let mut cfg = config(3);
    cfg.loss = LossWeights { alpha: 1e-9, beta: 1e-9, gamma: 0.0, generator_weight: 0.0, task_weight_in_g_step: 0.0, ..LossWeights::default() };
    cfg.train.weight_decay = 0.1;
    let mut tr = Trainer::new(cfg, &data(&t)).unwrap();
    let norms = |tr: &Trainer| [tr.generator.params.sq_norm(), tr.discriminator.params.sq_norm(), tr.classifier.params.sq_norm()];
    let n0 = norms(&tr);
    for _ in 0..5 {
        tr.d_step(&batch(&t.source, 0), &batch(&t.target, 0), None).unwrap();
        tr.g_step(&batch(&t.source, 0)).unwrap();
    }
    let n1 = norms(&tr);
    for i in 0..3 {
        assert!(n1[i] < n0[i], "net {i}: {} -> {}", n0[i], n1[i]);
    }
}

fn record(rs: &[LossRecord], name: &str) -> f64 {
    rs.iter().find(|r| r.name == name).unwrap_or_else(|| panic!("{name}")).value
}

#[test]
fn discriminator_learns_a_frozen_batch() {
    let t = toy(8, 4);
    let mut cfg = config(5);
    cfg.loss.beta = 0.0;
    cfg.discriminator.dropout_keep = 1.0;
    cfg.discriminator.noise_stddev = 0.0;
    let mut tr = Trainer::new(cfg, &data(&t)).unwrap();
    let (xs, xt) = (batch(&t.source, 0), batch(&t.target, 0));
    // the domain term is the log-likelihood, so binary cross-entropy is its negation
    let bce: Vec<f64> = (0..50).map(|_| -record(&tr.d_step(&xs, &xt, None).unwrap(), "domain")).collect();
    let head: f64 = bce[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = bce[45..].iter().sum::<f64>() / 5.0;
    assert!(tail < 0.5 * head, "bce {head} -> {tail}");
}

#[test]
fn content_loss_is_driven_down() {
    let t = toy(8, 6);
    let mut cfg = config(7);
    cfg.loss = LossWeights { gamma: 100.0, generator_weight: 0.0, task_weight_in_g_step: 0.0, ..LossWeights::default() };
    let mut tr = Trainer::new(cfg, &data(&t)).unwrap();
    let xs = batch(&t.source, 0);
    let c: Vec<f64> = (0..200).map(|_| record(&tr.g_step(&xs).unwrap(), "content")).collect();
    assert!(c[190..].iter().sum::<f64>() < 0.2 * c[..10].iter().sum::<f64>(), "{} -> {}", c[0], c[199]);
}

#[test]
fn records_are_finite_and_logged() {
    let t = toy(8, 8);
    let mut tr = Trainer::new(config(9), &data(&t)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let sum = run_training(&mut tr, &data(&t), &RunOptions { out_dir: Some(dir.path().into()) }).unwrap();
    assert!(tr.is_finished());
    assert!(sum.losses.iter().all(|r| r.value.is_finite()));
    for name in ["d_objective", "domain", "task", "g_objective", "generator", "g_task", "content"] {
        assert!(sum.losses.iter().any(|r| r.name == name), "{name}");
    }
    let csv = std::fs::read_to_string(dir.path().join(LOSS_FILE)).unwrap();
    assert!(csv.starts_with("step,loss_name,value\n"));
    assert_eq!(csv.lines().count(), 1 + sum.losses.len());
    assert!(dir.path().join(CHECKPOINT_FILE).exists());
}

#[test]
fn adam_closed_forms() {
    let (mut m, mut v) = (0.0, 0.0);
    assert_eq!(adam_update(0.7, 0.0, &mut m, &mut v, 1, 1e-3, 0.0), 0.7);
    for g in [-3.0, 1e-3, 250.0] {
        let (mut m, mut v) = (0.0, 0.0);
        let x = adam_update(0.0, g, &mut m, &mut v, 1, 1e-2, 0.0);
        assert!((x + 1e-2 * g / (g.abs() + ADAM_EPS)).abs() < 1e-15);
    }
    assert_eq!(lr_schedule(2e-4, 0.95, 20_000, 19_999), 2e-4);
    assert!((lr_schedule(2e-4, 0.95, 20_000, 40_000) - 2e-4 * 0.9025).abs() < 1e-18);
}

#[test]
fn same_seed_same_run() {
    let t = toy(10, 10);
    let run = |seed: u64| {
        let mut tr = Trainer::new(config(seed), &data(&t)).unwrap();
        run_training(&mut tr, &data(&t), &RunOptions::default()).unwrap();
        tr.checkpoint().encode()
    };
    assert_eq!(run(11), run(11));
    assert_ne!(run(11), run(12));
}

#[test]
fn checkpoint_round_trip_and_exact_resume() {
    let t = toy(10, 13);
    let dir = tempfile::tempdir().unwrap();
    let mut full = Trainer::new(config(14), &data(&t)).unwrap();
    run_training(&mut full, &data(&t), &RunOptions::default()).unwrap();

    let mut half = Trainer::new(config(14), &data(&t)).unwrap();
    for _ in 0..3 {
        half.train_step(&data(&t)).unwrap();
    }
    let path = dir.path().join("c.pxda");
    half.checkpoint().save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, half.checkpoint());
    let again = dir.path().join("d.pxda");
    loaded.save(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());

    let mut resumed = Trainer::from_checkpoint(config(14), &data(&t), &loaded).unwrap();
    assert_eq!(resumed.step(), 3);
    run_training(&mut resumed, &data(&t), &RunOptions::default()).unwrap();
    assert_eq!(resumed.checkpoint().encode(), full.checkpoint().encode());
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let t = toy(8, 0);
    let tr = Trainer::new(config(1), &data(&t)).unwrap();
    let bytes = tr.checkpoint().encode();
    let p = std::path::Path::new("c");
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::decode(p, &bad), Err(Error::Format { .. })));
    assert!(matches!(Checkpoint::decode(p, &bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
    let mut long = bytes.clone();
    long.push(1);
    assert!(Checkpoint::decode(p, &long).is_err());

    let mut other = config(1);
    other.generator.filters = 5;
    let ck = tr.checkpoint();
    assert!(Trainer::from_checkpoint(other, &data(&t), &ck).is_err());
}

#[test]
fn zero_steps_leaves_initialization() {
    let t = toy(8, 0);
    let mut cfg = config(15);
    cfg.train.total_steps = 0;
    let mut tr = Trainer::new(cfg.clone(), &data(&t)).unwrap();
    assert!(tr.is_finished());
    let init = tr.checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let sum = run_training(&mut tr, &data(&t), &RunOptions { out_dir: Some(dir.path().into()) }).unwrap();
    assert!(sum.losses.is_empty());
    assert_eq!(Checkpoint::load(dir.path().join(CHECKPOINT_FILE)).unwrap(), init);
}

#[test]
fn task_only_phase_follows_adversarial_training() {
    let t = toy(8, 0);
    let mut cfg = config(16);
    cfg.loss.train_t_on_source = false;
    cfg.loss.train_t_on_adapted = false;
    cfg.loss.beta = 0.0;
    cfg.train.task_only_steps = 3;
    assert_eq!(cfg.total_iterations(), 9);
    let mut tr = Trainer::new(cfg, &data(&t)).unwrap();
    assert_eq!(tr.eval_stream(), Stream::Generated);
    let sum = run_training(&mut tr, &data(&t), &RunOptions::default()).unwrap();
    assert_eq!(sum.losses.iter().filter(|r| r.name == "task_only").count(), 3);
    assert!(!sum.losses.iter().any(|r| r.name == "g_task"));
}

#[test]
fn adversarial_only_training_leaves_classifier_at_init() {
    let t = toy(8, 0);
    let mut cfg = config(17);
    cfg.loss.train_t_on_source = false;
    cfg.loss.train_t_on_adapted = false;
    cfg.loss.beta = 0.0;
    cfg.loss.gamma = 0.0;
    cfg.train.weight_decay = 1e-2;
    let mut tr = Trainer::new(cfg, &data(&t)).unwrap();
    let c0 = tr.classifier.params.clone();
    for _ in 0..6 {
        tr.train_step(&data(&t)).unwrap();
    }
    assert_eq!(tr.classifier.params, c0);
    tr.train_step(&data(&t)).unwrap();
    assert_ne!(trainable_values(&tr.classifier.params), trainable_values(&c0));
}

#[test]
fn setup_errors() {
    let t = toy(8, 0);
    let mut cfg = config(0);
    cfg.train.batch_size = 20;
    assert!(Trainer::new(cfg, &data(&t)).is_err());
    let mut cfg = config(0);
    cfg.generator.image_height = 16;
    assert!(Trainer::new(cfg, &data(&t)).is_err());
    let mut cfg = config(0);
    cfg.train.decay_factor = 0.0;
    assert!(matches!(Trainer::new(cfg, &data(&t)), Err(Error::Config(_))));
    let unl = Dataset::unlabeled("s", Domain::Source, 3, t.source.items().to_vec()).unwrap();
    let d = TrainData { source: &unl, target: &t.target, labeled_target: None };
    assert!(matches!(Trainer::new(config(0), &d), Err(Error::Unlabeled(_))));
}
