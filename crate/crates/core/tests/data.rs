use std::collections::HashSet;
use std::path::Path;

use pixelda_core::data::idx::*;
use pixelda_core::data::pnm::*;
use pixelda_core::data::*;
use pixelda_core::{Error, Quaternion};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Image {
    Image::new(h, w, c, (0..h * w * c).map(|_| rng.random()).collect()).unwrap()
}

fn digits(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..n).map(|i| LabeledImage::new(random_image(&mut rng, 8, 8, 1), i % 10)).collect();
    Dataset::labeled("digits", Domain::Source, 10, items).unwrap()
}

fn backgrounds(seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..4).map(|_| random_image(&mut rng, 12, 12, 3)).collect()
}

fn synth(seed: u64) -> SynthesisConfig {
    SynthesisConfig { crop_size: 8, seed, ..SynthesisConfig::default() }
}

#[test]
fn idx_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ims: Vec<Image> = (0..5).map(|_| random_image(&mut rng, 4, 3, 1)).collect();
    let labels = vec![0u8, 3, 9, 1, 1];
    let (ip, lp) = (dir.path().join("im.idx"), dir.path().join("lb.idx"));
    write_idx_images(&ip, &ims).unwrap();
    write_idx_labels(&lp, &labels).unwrap();
    assert_eq!(read_idx_images(&ip).unwrap(), ims);
    assert_eq!(read_idx_labels(&lp).unwrap(), labels);
    let ds = load_idx_pair(&ip, &lp, "x", Domain::Source, 10).unwrap();
    assert_eq!(ds.len(), 5);
    assert_eq!(ds.label(2), Some(9));

    let bytes = std::fs::read(&ip).unwrap();
    assert!(matches!(parse_idx(&ip, &bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(parse_idx(&ip, &extra), Err(Error::Format { .. })));
    let mut bad = bytes;
    bad[3] = 0x02;
    assert!(matches!(parse_idx(&ip, &bad), Err(Error::Format { .. })));
    std::fs::write(&lp, encode_idx(LABEL_MAGIC, &[4], &[0, 1, 2, 3])).unwrap();
    assert!(load_idx_pair(&ip, &lp, "x", Domain::Source, 10).is_err());
    assert!(matches!(read_idx(dir.path().join("missing")), Err(Error::Io { .. })));
}

#[test]
fn pnm_formats() {
    let p = Path::new("x.pgm");
    let parsed = parse_pnm(p, b"P5\n# comment\n2 1\n255\n\x07\xff").unwrap();
    assert_eq!(parsed, Pnm::Bytes(Image::new(1, 2, 1, vec![7, 255]).unwrap()));
    let wide = parse_pnm(p, &encode_gray16(1, 2, &[1, 65535])).unwrap();
    assert_eq!(wide, Pnm::Gray16 { height: 1, width: 2, data: vec![1, 65535] });
    assert!(parse_pnm(p, b"P3\n1 1\n255\n1").is_err());
    assert!(parse_pnm(p, b"P5\n2 1\n255\n\x07").is_err());
    assert!(parse_pnm(p, b"P5\n2 1\n255").is_err());
    assert!(parse_pnm(p, b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
}

#[test]
fn manifest_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let items: Vec<LabeledImage> = (0..6)
        .map(|i| {
            let v: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let q = Quaternion::new(v[0], v[1], v[2], v[3]).canonical();
            LabeledImage {
                pixels: random_image(&mut rng, 5, 4, 3),
                label: Some(i % 3),
                pose: Some(q),
                mask: Some(Mask::new(5, 4, (0..20).map(|_| rng.random_range(0..2)).collect()).unwrap()),
                depth: Some((0..20).map(|_| rng.random()).collect()),
            }
        })
        .collect();
    let ds = Dataset::labeled("poses", Domain::Target, 3, items).unwrap();
    write_image_dir(dir.path(), &ds).unwrap();
    let back = load_image_dir(dir.path(), "poses", Domain::Target, 3, true).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.image_shape(), Some([4, 5, 4]));

    let unl = load_image_dir(dir.path(), "u", Domain::Target, 3, false).unwrap();
    assert!(!unl.is_labeled());
    assert!(unl.items().iter().all(|it| it.label.is_none() && it.pose.is_none()));

    let rows = read_manifest(dir.path().join("manifest.csv")).unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[0].pose, ds.get(0).pose);
}

#[test]
fn manifest_rejects_bad_rows() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("manifest.csv");
    for bad in ["a.pgm,x\n", "a.pgm,1,0.5,0.5,0.5\n", "a.pgm,1,1,1,0,0\n", ",1\n"] {
        std::fs::write(&m, bad).unwrap();
        assert!(matches!(read_manifest(&m), Err(Error::Format { .. })), "{bad:?}");
    }
    std::fs::write(&m, "filename,label\na.pgm,\n").unwrap();
    write_image(dir.path().join("a.pgm"), &Image::filled(2, 2, 1, 9)).unwrap();
    assert!(load_image_dir(dir.path(), "s", Domain::Source, 10, true).is_err());
    assert_eq!(load_image_dir(dir.path(), "s", Domain::Source, 10, false).unwrap().len(), 1);
}

#[test]
fn composite_examples() {
    let digit = Image::new(1, 3, 1, vec![0, 128, 255]).unwrap();
    let bg = Image::new(1, 3, 3, vec![10, 20, 30, 10, 20, 30, 10, 20, 30]).unwrap();
    let out = synthesize_composite(&digit, &bg, 0.5).unwrap();
    assert_eq!(out.data, vec![10, 20, 30, 245, 235, 225, 245, 235, 225]);
    assert!(synthesize_composite(&Image::filled(2, 2, 1, 0), &bg, 0.5).is_err());
}

#[test]
fn synthetic_target_set() {
    let src = digits(30, 1);
    let bgs = backgrounds(2);
    let a = build_synthetic_target_set(&src, &bgs, &synth(5), "t", false).unwrap();
    let b = build_synthetic_target_set(&src, &bgs, &synth(5), "t", false).unwrap();
    let c = build_synthetic_target_set(&src, &bgs, &synth(6), "t", false).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.len(), 30);
    assert!(!a.is_labeled());
    assert_eq!(a.image_shape(), Some([3, 8, 8]));
    let l = build_synthetic_target_set(&src, &bgs, &synth(5), "t", true).unwrap();
    assert_eq!(l.label(7), Some(7));
    assert!(build_synthetic_target_set(&src, &[], &synth(5), "t", false).is_err());
    assert!(build_synthetic_target_set(&src, &bgs, &SynthesisConfig { crop_size: 20, ..synth(5) }, "t", false).is_err());
    assert!(SynthesisConfig { threshold: 1.0, ..synth(0) }.validate().is_err());
    assert!(SynthesisConfig { threshold: 0.0, ..synth(0) }.validate().is_err());
}

#[test]
fn backgrounds_load_sorted() {
    let dir = tempfile::tempdir().unwrap();
    write_image(dir.path().join("b.pgm"), &Image::filled(4, 4, 1, 50)).unwrap();
    write_image(dir.path().join("a.ppm"), &Image::filled(4, 4, 3, 9)).unwrap();
    std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
    let bgs = load_backgrounds(dir.path()).unwrap();
    assert_eq!(bgs.len(), 2);
    assert_eq!(bgs[0].data[0], 9);
    assert_eq!(bgs[1].channels, 3);
    assert!(load_backgrounds(tempfile::tempdir().unwrap().path()).is_err());
}

#[test]
fn noise_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let z = sample_noise::<f64, _>(1000, 100, &mut rng);
    assert_eq!(z.shape(), &[1000, 100]);
    assert!(z.data().iter().all(|v| v.abs() < 1.0));
    let n = z.len() as f64;
    let mean = z.sum() / n;
    let var = z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 0.01, "mean {mean}");
    assert!((var - 1.0 / 3.0).abs() < 0.01, "var {var}");
    let z32 = sample_noise::<f32, _>(100, 100, &mut rng);
    assert!(z32.data().iter().all(|v| v.abs() < 1.0));
}

#[test]
fn batches_carry_labels_only_when_labeled() {
    let ds = digits(12, 3);
    let b = Batch::<f32>::from_dataset(&ds, &[0, 5, 11]).unwrap();
    assert_eq!(b.images.shape(), &[3, 1, 8, 8]);
    assert_eq!(b.labels, Some(vec![0, 5, 1]));
    let oh = b.onehot.unwrap();
    assert_eq!(oh.shape(), &[3, 10]);
    assert_eq!(oh.data()[5], 0.0);
    assert_eq!(oh.data()[15], 1.0);
    assert_eq!(b.images.data()[0], normalize(ds.get(0).pixels.data[0]) as f32);
    let unl = Dataset::unlabeled("u", Domain::Target, 10, ds.items().to_vec()).unwrap();
    let b = Batch::<f32>::from_dataset(&unl, &[0, 1]).unwrap();
    assert!(b.labels.is_none() && b.onehot.is_none() && b.poses.is_none());
    assert!(unl.require_labels().is_err());
    assert!(matches!(unl.filter_classes("f", |_| true), Err(Error::Unlabeled(_))));
}

#[test]
fn iterator_epochs_and_resume() {
    let it = BatchIterator::new(10, 3, 7, Some(3)).unwrap();
    let batches: Vec<Vec<usize>> = it.collect();
    assert_eq!(batches.len(), 9);
    let epochs: Vec<Vec<usize>> = batches.chunks(3).map(|c| c.concat()).collect();
    for e in &epochs {
        assert_eq!(e.iter().collect::<HashSet<_>>().len(), 9);
    }
    assert_ne!(epochs[0], epochs[1]);
    let again: Vec<Vec<usize>> = BatchIterator::new(10, 3, 7, Some(3)).unwrap().collect();
    assert_eq!(again, batches);
    let other: Vec<Vec<usize>> = BatchIterator::new(10, 3, 8, Some(3)).unwrap().collect();
    assert_ne!(other, batches);

    let mut a = BatchIterator::new(10, 3, 7, None).unwrap();
    for _ in 0..4 {
        a.next();
    }
    let mut b = BatchIterator::new(10, 3, 7, None).unwrap();
    b.restore(a.state()).unwrap();
    for _ in 0..10 {
        assert_eq!(a.next(), b.next());
    }
    assert!(b.restore(IteratorState { epoch: 0, cursor: 4 }).is_err());
    assert!(BatchIterator::new(0, 1, 0, None).is_err());
    assert!(BatchIterator::new(4, 5, 0, None).is_err());
    assert!(BatchIterator::new(4, 0, 0, None).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn composite_rule_holds_per_pixel(seed in any::<u64>(), h in 1usize..10, w in 1usize..10, t in 0.01f64..0.99) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = random_image(&mut rng, h, w, 1);
        let bg = random_image(&mut rng, h, w, 3);
        let out = synthesize_composite(&d, &bg, t).unwrap();
        for p in 0..h * w {
            let on = d.data[p] as f64 > t * 255.0;
            for c in 0..3 {
                let want = if on { 255 - bg.data[p * 3 + c] } else { bg.data[p * 3 + c] };
                prop_assert_eq!(out.data[p * 3 + c], want);
            }
        }
    }

    #[test]
    fn idx_bytes_round_trip(seed in any::<u64>(), n in 0usize..6, h in 1usize..6, w in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<u8> = (0..n * h * w).map(|_| rng.random()).collect();
        let bytes = encode_idx(IMAGE_MAGIC, &[n, h, w], &data);
        let back = parse_idx(Path::new("m"), &bytes).unwrap();
        prop_assert_eq!(back.dims, vec![n, h, w]);
        prop_assert_eq!(back.data, data);
    }

    #[test]
    fn pnm_round_trip(seed in any::<u64>(), h in 1usize..8, w in 1usize..8, rgb in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let im = random_image(&mut rng, h, w, if rgb { 3 } else { 1 });
        prop_assert_eq!(parse_pnm(Path::new("x"), &encode_image(&im).unwrap()).unwrap(), Pnm::Bytes(im));
        let d: Vec<u16> = (0..h * w).map(|_| rng.random()).collect();
        prop_assert_eq!(parse_pnm(Path::new("x"), &encode_gray16(h, w, &d)).unwrap(), Pnm::Gray16 { height: h, width: w, data: d });
    }

    #[test]
    fn normalization_is_bounded_and_invertible(v in any::<u8>(), d in any::<u16>()) {
        let x = normalize(v);
        prop_assert!((-1.0..=1.0).contains(&x));
        prop_assert_eq!(denormalize(x), v);
        prop_assert_eq!(denormalize_depth(normalize_depth(d)), d);
    }

    #[test]
    fn iterator_epoch_is_a_partial_permutation(len in 1usize..50, bs in 1usize..10, seed in any::<u64>()) {
        prop_assume!(bs <= len);
        let it = BatchIterator::new(len, bs, seed, Some(1)).unwrap();
        let all: Vec<usize> = it.flatten().collect();
        prop_assert_eq!(all.len(), (len / bs) * bs);
        prop_assert_eq!(all.iter().collect::<HashSet<_>>().len(), all.len());
        prop_assert!(all.iter().all(|&i| i < len));
    }
}
