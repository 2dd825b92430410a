use pixelda_core::models::*;
use pixelda_tensor::{ParamKind, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gen_config(h: usize, w: usize, blocks: usize) -> GeneratorConfig {
    GeneratorConfig { image_height: h, image_width: w, image_channels: 3, residual_blocks: blocks, filters: 8, noise_dim: 5 }
}

fn uniform(shape: [usize; 4], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn noise(b: usize, d: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([b, d], |_| rng.random_range(-1.0..1.0))
}

fn small_classifier(pose: bool) -> TaskClassifierConfig {
    TaskClassifierConfig {
        class_count: 10,
        pose_head: pose,
        private_layer_spec: "conv8k3".into(),
        shared_layer_spec: "conv8k3s2,fc16".into(),
    }
}

#[test]
fn generator_preserves_resolution() {
    for (h, w) in [(16, 16), (28, 28), (32, 32), (64, 64), (12, 20)] {
        let g = Generator::<f32>::init(gen_config(h, w, 1), 3).unwrap();
        let out = g.generate(&uniform([2, 3, h, w], 0), &noise(2, 5, 1)).unwrap();
        assert_eq!(out.shape(), &[2, 3, h, w]);
        assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn generator_depends_on_noise() {
    let g = Generator::<f32>::init(gen_config(16, 16, 2), 11).unwrap();
    let x = uniform([2, 3, 16, 16], 0);
    let a = g.generate(&x, &noise(2, 5, 1)).unwrap();
    let b = g.generate(&x, &noise(2, 5, 2)).unwrap();
    let c = g.generate(&x, &noise(2, 5, 1)).unwrap();
    assert_ne!(a, b);
    assert_eq!(a, c);
}

#[test]
fn generator_rejects_bad_shapes() {
    let g = Generator::<f32>::init(gen_config(16, 16, 1), 0).unwrap();
    assert!(g.generate(&uniform([1, 3, 8, 8], 0), &noise(1, 5, 0)).is_err());
    assert!(g.generate(&uniform([1, 1, 16, 16], 0), &noise(1, 5, 0)).is_err());
    assert!(g.generate(&uniform([2, 3, 16, 16], 0), &noise(1, 5, 0)).is_err());
    assert!(g.generate(&uniform([1, 3, 16, 16], 0), &noise(1, 4, 0)).is_err());
    assert!(Generator::<f32>::init(gen_config(16, 16, 0), 0).is_err());
}

#[test]
fn zeroed_residual_blocks_are_identity() {
    let mut one = Generator::<f32>::init(gen_config(16, 16, 1), 5).unwrap();
    let mut many = Generator::<f32>::init(gen_config(16, 16, 4), 6).unwrap();
    for g in [&mut one, &mut many] {
        for name in g.residual_kernels() {
            let id = g.params.id_of(&name).unwrap();
            g.params.get_mut(id).value.fill(0.0);
        }
    }
    for p in one.params.iter().filter(|p| !p.name.starts_with("generator/res")) {
        let id = many.params.id_of(&p.name).unwrap();
        many.params.get_mut(id).value = p.value.clone();
    }
    let x = uniform([2, 3, 16, 16], 1);
    let z = noise(2, 5, 2);
    assert_eq!(one.generate(&x, &z).unwrap(), many.generate(&x, &z).unwrap());
}

#[test]
fn discriminator_pyramid() {
    assert_eq!(pyramid_stages(32, 32), 3);
    assert_eq!(pyramid_stages(16, 16), 2);
    assert_eq!(pyramid_stages(28, 28), 3);
    assert_eq!(pyramid_stages(64, 64), 4);
    assert_eq!(pyramid_stages(4, 4), 0);
    let cfg = DiscriminatorConfig { base_filters: 64, ..DiscriminatorConfig::default() };
    let d = Discriminator::<f32>::init(cfg.clone(), [3, 32, 32], 0).unwrap();
    assert_eq!(d.filters(), &[64, 128, 256, 512]);
    let small = Discriminator::<f32>::init(cfg, [3, 16, 16], 0).unwrap();
    assert_eq!(small.filters(), &[64, 128, 256]);
}

#[test]
fn discriminator_outputs_likelihoods() {
    let cfg = DiscriminatorConfig { base_filters: 8, ..DiscriminatorConfig::default() };
    let d = Discriminator::<f32>::init(cfg, [3, 16, 16], 4).unwrap();
    let x = uniform([5, 3, 16, 16], 3);
    let p = d.discriminate(&x).unwrap();
    assert_eq!(p.shape(), &[5]);
    assert!(p.data().iter().all(|v| *v > 0.0 && *v < 1.0));
    assert_eq!(p, d.discriminate(&x).unwrap());
    assert!(d.discriminate(&uniform([1, 3, 8, 8], 0)).is_err());
}

#[test]
fn discriminator_train_mode_is_stochastic_eval_is_not() {
    let cfg = DiscriminatorConfig { base_filters: 8, dropout_keep: 0.5, noise_stddev: 0.2 };
    let d = Discriminator::<f32>::init(cfg, [3, 16, 16], 4).unwrap();
    let x = uniform([3, 3, 16, 16], 3);
    let run = |mode: Mode, seed: u64| {
        let mut tape = Tape::new();
        let b = d.params.bind(&mut tape, false).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let out = d.forward(&mut tape, &b, xv, mode, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        tape.value(out).clone()
    };
    assert_ne!(run(Mode::Train, 1), run(Mode::Train, 2));
    assert_eq!(run(Mode::Train, 1), run(Mode::Train, 1));
    assert_eq!(run(Mode::Eval, 1), run(Mode::Eval, 2));
}

#[test]
fn classifier_outputs() {
    let t = TaskClassifier::<f32>::init(small_classifier(true), [3, 16, 16], 9).unwrap();
    let x = uniform([4, 3, 16, 16], 0);
    for stream in [Stream::Source, Stream::Generated] {
        let (p, q) = t.classify(&x, stream).unwrap();
        assert_eq!(p.shape(), &[4, 10]);
        for row in p.data().chunks(10) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
        let q = q.unwrap();
        for row in q.data().chunks(4) {
            assert!((row.iter().map(|v| v * v).sum::<f32>() - 1.0).abs() < 1e-5);
            assert!(row[0] >= 0.0);
        }
    }
    let plain = TaskClassifier::<f32>::init(small_classifier(false), [3, 16, 16], 9).unwrap();
    assert!(plain.classify(&x, Stream::Source).unwrap().1.is_none());
    assert!(plain.predict_pose(&x, Stream::Source).is_err());
}

#[test]
fn private_layers_only_see_their_stream() {
    let t = TaskClassifier::<f32>::init(small_classifier(false), [3, 16, 16], 2).unwrap();
    let x = uniform([2, 3, 16, 16], 1);
    let mut tape = Tape::new();
    let b = t.params.bind(&mut tape, true).unwrap();
    let xv = tape.constant(x).unwrap();
    let out = t.forward(&mut tape, &b, xv, Stream::Source, Mode::Train).unwrap();
    let loss = tape.sum(out.logits).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut params = t.params.clone();
    params.accumulate(&b, &grads);
    for p in params.trainable() {
        let touched = p.grad.data().iter().any(|g| *g != 0.0);
        if p.name.starts_with("classifier/generated/") {
            assert!(!touched, "{} received gradient", p.name);
        } else if p.name.ends_with("/kernel") {
            assert!(touched, "{} received no gradient", p.name);
        }
    }
}

#[test]
fn copy_private_makes_streams_coincide() {
    let mut t = TaskClassifier::<f32>::init(small_classifier(true), [3, 16, 16], 2).unwrap();
    let x = uniform([3, 3, 16, 16], 1);
    assert_ne!(t.classify(&x, Stream::Source).unwrap(), t.classify(&x, Stream::Generated).unwrap());
    t.copy_private(Stream::Source);
    assert_eq!(t.classify(&x, Stream::Source).unwrap(), t.classify(&x, Stream::Generated).unwrap());
}

#[test]
fn empty_private_stack_shares_everything() {
    let cfg = TaskClassifierConfig { private_layer_spec: String::new(), ..small_classifier(false) };
    let t = TaskClassifier::<f32>::init(cfg, [3, 16, 16], 2).unwrap();
    let x = uniform([3, 3, 16, 16], 1);
    assert_eq!(t.classify(&x, Stream::Source).unwrap(), t.classify(&x, Stream::Generated).unwrap());
}

#[test]
fn layer_specs() {
    assert_eq!(
        parse_layer_spec("conv32k5, pool ,conv64k3s2,fc100").unwrap(),
        vec![
            LayerSpec::Conv { filters: 32, kernel: 5, stride: 1 },
            LayerSpec::Pool,
            LayerSpec::Conv { filters: 64, kernel: 3, stride: 2 },
            LayerSpec::Fc(100),
        ]
    );
    assert!(parse_layer_spec("").unwrap().is_empty());
    for bad in ["conv", "conv0k3", "fc", "pool2", "dense10", "conv8k0"] {
        assert!(parse_layer_spec(bad).is_err(), "{bad}");
    }
    let after_fc = TaskClassifierConfig { shared_layer_spec: "fc8,conv8k3".into(), ..small_classifier(false) };
    assert!(TaskClassifier::<f32>::init(after_fc, [3, 16, 16], 0).is_err());
}

fn init_stats(params: &pixelda_tensor::ParamSet<f32>) -> (f64, usize) {
    let mut big = (0.0, 0);
    for p in params.trainable() {
        if p.name.ends_with("/bias") || p.name.ends_with("/offset") {
            assert!(p.value.data().iter().all(|v| *v == 0.0), "{} not zero", p.name);
        }
        let weights = p.name.ends_with("/kernel") || p.name.ends_with("/weight");
        if weights && p.value.len() > big.1 {
            let n = p.value.len() as f64;
            let mean = p.value.data().iter().map(|v| *v as f64).sum::<f64>() / n;
            let var = p.value.data().iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / n;
            big = (var.sqrt(), p.value.len());
        }
    }
    big
}

#[test]
fn initialization() {
    let cfg = DiscriminatorConfig { base_filters: 32, ..DiscriminatorConfig::default() };
    let d = Discriminator::<f32>::init(cfg.clone(), [3, 32, 32], 7).unwrap();
    let (std, n) = init_stats(&d.params);
    assert!(n > 100_000);
    assert!((0.019..=0.021).contains(&std), "std {std}");
    assert_eq!(d.params, Discriminator::<f32>::init(cfg.clone(), [3, 32, 32], 7).unwrap().params);
    assert_ne!(d.params, Discriminator::<f32>::init(cfg, [3, 32, 32], 8).unwrap().params);

    let g = Generator::<f32>::init(GeneratorConfig::default(), 1).unwrap();
    let (std, _) = init_stats(&g.params);
    assert!((0.019..=0.021).contains(&std), "std {std}");
    for p in g.params.iter() {
        if p.name.ends_with("/scale") || p.name.ends_with("/moving_var") {
            assert!(p.value.data().iter().all(|v| *v == 1.0), "{}", p.name);
        }
        if p.kind == ParamKind::Buffer && p.name.ends_with("/moving_mean") {
            assert!(p.value.data().iter().all(|v| *v == 0.0));
        }
    }
    let t = TaskClassifier::<f32>::init(small_classifier(true), [3, 16, 16], 1).unwrap();
    init_stats(&t.params);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

    #[test]
    fn generator_output_is_bounded(seed in any::<u64>(), h in 4usize..20, w in 4usize..20, scale in 0.1f32..50.0) {
        let g = Generator::<f32>::init(gen_config(h, w, 1), seed).unwrap();
        let x = uniform([1, 3, h, w], seed ^ 1).map(|v| v * scale);
        let out = g.generate(&x, &noise(1, 5, seed ^ 2)).unwrap();
        prop_assert_eq!(out.shape(), &[1, 3, h, w]);
        prop_assert!(out.data().iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn discriminator_is_deterministic_in_eval(seed in any::<u64>(), h in 4usize..24) {
        let cfg = DiscriminatorConfig { base_filters: 4, ..DiscriminatorConfig::default() };
        let d = Discriminator::<f32>::init(cfg, [1, h, h], seed).unwrap();
        prop_assert_eq!(d.filters().len(), pyramid_stages(h, h) + 1);
        let x = uniform([2, 1, h, h], seed);
        let p = d.discriminate(&x).unwrap();
        prop_assert!(p.data().iter().all(|v| *v > 0.0 && *v < 1.0));
        prop_assert_eq!(p, d.discriminate(&x).unwrap());
    }
}
