//! Small synthetic problems for fast end-to-end checks.
//!
//! Digits: 16x16 white-on-black glyphs from a 5x7 bitmap font (source) and the same kind of
//! glyphs, drawn independently, inverted into crops of textured color backgrounds (target).
//! Pose: three colored blobs at the image-plane projections of a rotated frame's axes, with
//! blob size and brightness cueing depth.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{build_synthetic_target_set, Dataset, Domain, Image, LabeledImage, Mask, SynthesisConfig};
use crate::error::Result;
use crate::losses::LossWeights;
use crate::models::{DiscriminatorConfig, GeneratorConfig, TaskClassifierConfig};
use crate::quaternion::Quaternion;
use crate::trainer::{ExperimentConfig, TrainConfig};

pub const DIGIT_SIZE: usize = 16;

const FONT: [[u8; 7]; 10] = [
    [0x0e, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0e],
    [0x04, 0x0c, 0x04, 0x04, 0x04, 0x04, 0x0e],
    [0x0e, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1f],
    [0x1f, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0e],
    [0x02, 0x06, 0x0a, 0x12, 0x1f, 0x02, 0x02],
    [0x1f, 0x10, 0x1e, 0x01, 0x01, 0x11, 0x0e],
    [0x06, 0x08, 0x10, 0x1e, 0x11, 0x11, 0x0e],
    [0x1f, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
    [0x0e, 0x11, 0x11, 0x0e, 0x11, 0x11, 0x0e],
    [0x0e, 0x11, 0x11, 0x0f, 0x01, 0x02, 0x0c],
];

/// A jittered grayscale glyph: 2x nearest upscale, random offset and random stroke intensity.
pub fn render_glyph<R: Rng + ?Sized>(digit: usize, rng: &mut R) -> Image {
    let mut im = Image::filled(DIGIT_SIZE, DIGIT_SIZE, 1, 0);
    let (ox, oy) = (rng.random_range(0..=DIGIT_SIZE - 10), rng.random_range(0..=DIGIT_SIZE - 14));
    let ink = rng.random_range(190..=255u8);
    for (r, bits) in FONT[digit].iter().enumerate() {
        for c in 0..5 {
            if bits >> (4 - c) & 1 == 1 {
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    im.set(oy + 2 * r + dy, ox + 2 * c + dx, 0, ink);
                }
            }
        }
    }
    im
}

/// Textured RGB background: a gradient between two random colors overlaid with faint
/// stripes and pixel noise.
pub fn render_background<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Image {
    let from: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..255.0));
    let to: [f64; 3] = std::array::from_fn(|c| (from[c] + rng.random_range(-80.0..80.0)).clamp(0.0, 255.0));
    let theta = rng.random_range(0.0..2.0 * PI);
    let (gx, gy) = (theta.cos(), theta.sin());
    let stripe = rng.random_range(0.0..PI);
    let (sx, sy) = (stripe.cos(), stripe.sin());
    let freq = rng.random_range(0.3..1.0);
    let mut im = Image::filled(size, size, 3, 0);
    let half = size as f64 / 2.0;
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 - half, y as f64 - half);
            let t = (0.5 + 0.5 * (u * gx + v * gy) / half).clamp(0.0, 1.0);
            let wave = 12.0 * (freq * (u * sx + v * sy)).sin();
            for c in 0..3 {
                let n: f64 = StandardNormal.sample(rng);
                let val = from[c] * (1.0 - t) + to[c] * t + wave + 4.0 * n;
                im.set(y, x, c, val.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    im
}

fn glyph_item<R: Rng + ?Sized>(rng: &mut R) -> LabeledImage {
    let label = rng.random_range(0..10);
    let glyph = render_glyph(label, rng);
    let mask = Mask::new(DIGIT_SIZE, DIGIT_SIZE, glyph.data.iter().map(|&v| u8::from(v > 0)).collect()).expect("size");
    LabeledImage { pixels: glyph.replicate(3), label: Some(label), pose: None, mask: Some(mask), depth: None }
}

/// The two-domain digit problem.
#[derive(Debug, Clone)]
pub struct DigitToy {
    /// Labeled glyphs with masks.
    pub source: Dataset,
    pub source_test: Dataset,
    /// Unlabeled composites.
    pub target: Dataset,
    /// Labeled composites drawn independently of `target`.
    pub target_test: Dataset,
    /// Labels of `target`, for protocols that split it by class.
    pub target_labeled: Dataset,
}

fn composites(glyphs: &Dataset, backgrounds: &[Image], seed: u64, split: &str) -> Result<Dataset> {
    let cfg = SynthesisConfig { background_dir: Default::default(), crop_size: DIGIT_SIZE, threshold: 0.5, seed };
    build_synthetic_target_set(glyphs, backgrounds, &cfg, split, true)
}

pub fn digit_toy(train: usize, test: usize, seed: u64) -> Result<DigitToy> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let glyphs = |n: usize, split: &str, rng: &mut ChaCha8Rng| {
        Dataset::labeled(split, Domain::Source, 10, (0..n).map(|_| glyph_item(rng)).collect())
    };
    let source = glyphs(train, "source-train", &mut rng)?;
    let source_test = glyphs(test, "source-test", &mut rng)?;
    let target_glyphs = glyphs(train, "target-glyphs", &mut rng)?;
    let test_glyphs = glyphs(test, "target-test-glyphs", &mut rng)?;
    let backgrounds: Vec<Image> = (0..64).map(|_| render_background(2 * DIGIT_SIZE, &mut rng)).collect();
    let target_labeled = composites(&target_glyphs, &backgrounds[..48], rng.random(), "target-train")?;
    let target_test = composites(&test_glyphs, &backgrounds[48..], rng.random(), "target-test")?;
    let target = Dataset::unlabeled("target-train", Domain::Target, 10, target_labeled.items().to_vec())?;
    Ok(DigitToy { source, source_test, target, target_test, target_labeled })
}

/// Small networks and schedule sized for the digit toy on one CPU core.
pub fn digit_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        train: TrainConfig {
            learning_rate: 1e-3,
            decay_factor: 0.95,
            decay_interval: 20_000,
            total_steps: 1500,
            batch_size: 32,
            weight_decay: 1e-5,
            seed,
            profile: "toy".into(),
            log_interval: 100,
            ..TrainConfig::default()
        },
        loss: LossWeights { alpha: 1.0, beta: 1.0, gamma: 0.0, generator_weight: 1.0, task_weight_in_g_step: 1.0, ..LossWeights::default() },
        generator: GeneratorConfig {
            image_height: DIGIT_SIZE,
            image_width: DIGIT_SIZE,
            image_channels: 3,
            residual_blocks: 2,
            filters: 16,
            noise_dim: 32,
        },
        discriminator: DiscriminatorConfig { base_filters: 16, dropout_keep: 0.9, noise_stddev: 0.2 },
        classifier: TaskClassifierConfig {
            class_count: 10,
            pose_head: false,
            private_layer_spec: "conv16k5,pool".into(),
            shared_layer_spec: "conv32k5,pool,fc64".into(),
        },
    }
}

/// Uniform random rotation of at most `max_angle` radians: uniform axis, uniform angle.
pub fn random_rotation<R: Rng + ?Sized>(max_angle: f64, rng: &mut R) -> Quaternion {
    let axis = loop {
        let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
        if v.iter().map(|a| a * a).sum::<f64>() > 1e-12 {
            break v;
        }
    };
    Quaternion::from_axis_angle(axis, rng.random_range(0.0..=max_angle)).canonical()
}

pub const POSE_SIZE: usize = 16;
const AXIS_COLORS: [[f64; 3]; 3] = [[255.0, 40.0, 40.0], [40.0, 255.0, 40.0], [60.0, 60.0, 255.0]];

/// Renders the projected axes of `q` as Gaussian blobs; nearer blobs are larger and brighter.
/// Class 1 adds a dim center marker.
pub fn render_pose(q: Quaternion, class: usize) -> Image {
    let s = POSE_SIZE as f64;
    let c0 = (s - 1.0) / 2.0;
    let radius = 0.33 * s;
    let mut acc = vec![0.0f64; POSE_SIZE * POSE_SIZE * 3];
    let mut blobs: Vec<([f64; 3], [f64; 3])> = (0..3)
        .map(|a| {
            let mut e = [0.0; 3];
            e[a] = 1.0;
            (q.rotate(e), AXIS_COLORS[a])
        })
        .collect();
    // far blobs first so near ones paint over them
    blobs.sort_by(|a, b| a.0[2].total_cmp(&b.0[2]));
    for (p, color) in blobs {
        let (cx, cy) = (c0 + radius * p[0], c0 - radius * p[1]);
        let sigma = 1.1 + 0.45 * p[2];
        let gain = 0.6 + 0.4 * (p[2] + 1.0) / 2.0;
        for y in 0..POSE_SIZE {
            for x in 0..POSE_SIZE {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let a = (-d2 / (2.0 * sigma * sigma)).exp() * gain;
                let i = (y * POSE_SIZE + x) * 3;
                for ch in 0..3 {
                    acc[i + ch] = acc[i + ch] * (1.0 - a) + color[ch] * a;
                }
            }
        }
    }
    if class == 1 {
        for (y, x) in [(7, 7), (7, 8), (8, 7), (8, 8)] {
            for ch in 0..3 {
                let i = (y * POSE_SIZE + x) * 3 + ch;
                acc[i] = acc[i].max(120.0);
            }
        }
    }
    Image::new(POSE_SIZE, POSE_SIZE, 3, acc.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect()).expect("size")
}

/// Labeled pose set: two classes, rotations within 90 degrees of identity.
pub fn pose_toy(count: usize, seed: u64, split: &str) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..count)
        .map(|_| {
            let q = random_rotation(PI / 2.0, &mut rng);
            let class = rng.random_range(0..2);
            LabeledImage { pixels: render_pose(q, class), label: Some(class), pose: Some(q), mask: None, depth: None }
        })
        .collect();
    Dataset::labeled(split, Domain::Source, 2, items)
}

/// Configuration for training a pose-regressing task network on [`pose_toy`] data.
pub fn pose_config(seed: u64) -> ExperimentConfig {
    let mut cfg = digit_config(seed);
    cfg.generator.image_height = POSE_SIZE;
    cfg.generator.image_width = POSE_SIZE;
    cfg.classifier = TaskClassifierConfig {
        class_count: 2,
        pose_head: true,
        private_layer_spec: "conv32k3".into(),
        shared_layer_spec: "conv32k3s2,conv64k3s2,fc128".into(),
    };
    cfg.loss.xi = 1.0;
    cfg.train.total_steps = 2000;
    cfg.train.learning_rate = 1e-3;
    cfg.train.decay_factor = 0.5;
    cfg.train.decay_interval = 700;
    cfg
}
