use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pixelda_core::data::{read_manifest, write_image_dir, Dataset, Domain, Image, LabeledImage};
use pixelda_core::data::pnm::write_image;
use tempfile::TempDir;

fn digit(label: usize, i: usize) -> Image {
    let mut im = Image::filled(8, 8, 1, 10);
    for y in 1..7 {
        for x in 0..8 {
            if (x + y + i) % 3 == label {
                im.set(y, x, 0, 230);
            }
        }
    }
    im
}

fn colored(label: usize, i: usize) -> Image {
    let mut im = Image::filled(8, 8, 3, 40 + 10 * (i % 4) as u8);
    for y in 0..8 {
        for x in 0..8 {
            if (x + y + i) % 3 == label {
                im.set(y, x, label, 250);
            }
        }
    }
    im
}

/// Small data root: gray labeled source, color target and test splits, two backgrounds.
fn fixture() -> TempDir {
    let dir = TempDir::new().unwrap();
    let r = dir.path();
    let src: Vec<LabeledImage> = (0..12).map(|i| LabeledImage::new(digit(i % 3, i), i % 3)).collect();
    write_image_dir(r.join("source"), &Dataset::labeled("source", Domain::Source, 3, src).unwrap()).unwrap();
    let tgt: Vec<LabeledImage> = (0..12).map(|i| LabeledImage::new(colored(i % 3, i), i % 3)).collect();
    write_image_dir(r.join("target"), &Dataset::unlabeled("target", Domain::Target, 3, tgt.clone()).unwrap()).unwrap();
    write_image_dir(r.join("test"), &Dataset::labeled("test", Domain::Target, 3, tgt[..6].to_vec()).unwrap()).unwrap();
    fs::create_dir(r.join("bg")).unwrap();
    for k in 0..2u8 {
        let data = (0..16 * 16 * 3).map(|i| (i as u8).wrapping_mul(7 + k)).collect();
        write_image(r.join("bg").join(format!("b{k}.ppm")), &Image::new(16, 16, 3, data).unwrap()).unwrap();
    }
    fs::write(
        r.join("run.toml"),
        format!(
            r#"
[train]
total_steps = 4
batch_size = 4
log_interval = 1
[generator]
image_height = 8
image_width = 8
image_channels = 3
residual_blocks = 1
filters = 4
noise_dim = 3
[discriminator]
base_filters = 4
[classifier]
class_count = 3
private_layer_spec = "conv4"
shared_layer_spec = "fc8"
[synth]
background_dir = "bg"
crop_size = 8
seed = 11
[data]
root = {:?}
source = "source"
target = "target"
test = "test"
"#,
            r.display().to_string()
        ),
    )
    .unwrap();
    dir
}

fn pixelda(root: &Path, cmd: &str, out: &Path, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pixelda"))
        .arg(cmd)
        .arg("--config")
        .arg(root.join("run.toml"))
        .arg("--out")
        .arg(out)
        .args(extra)
        .env_remove("PIXELDA_DATA_ROOT")
        .output()
        .unwrap()
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "exit {:?}\nstderr: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().into(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn synth_is_deterministic_per_seed() {
    let fx = fixture();
    let r = fx.path();
    let a = ok(&pixelda(r, "synth", &r.join("a"), &[]));
    assert!(a.contains("12") && a.contains("seed 11"), "{a}");
    ok(&pixelda(r, "synth", &r.join("b"), &[]));
    ok(&pixelda(r, "synth", &r.join("c"), &["--set", "synth.seed=12"]));
    let strip = |d: &Path| dir_bytes(d).into_iter().filter(|(n, _)| n != Path::new("config.toml")).collect::<Vec<_>>();
    assert_eq!(strip(&r.join("a")), strip(&r.join("b")));
    assert_ne!(strip(&r.join("a")), strip(&r.join("c")));
    let rows = read_manifest(r.join("a/manifest.csv")).unwrap();
    assert_eq!(rows.len(), 12);
    assert!(rows.iter().enumerate().all(|(i, row)| row.label == Some(i % 3)));
}

#[test]
fn synth_without_backgrounds_names_the_path() {
    let fx = fixture();
    let r = fx.path();
    let o = pixelda(r, "synth", &r.join("out"), &["--set", "synth.background_dir=nowhere"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("nowhere"), "{}", stderr(&o));
    assert!(!r.join("out").exists());
}

#[test]
fn zero_step_train_writes_the_initial_checkpoint() {
    let fx = fixture();
    let r = fx.path();
    let out = r.join("run");
    ok(&pixelda(r, "train", &out, &["--set", "train.total_steps=0", "--set", "loss.beta=0"]));
    assert!(out.join("checkpoint.pxda").is_file());
    assert!(out.join("config.toml").is_file());
    assert_eq!(fs::read_to_string(out.join("losses.csv")).unwrap(), "step,loss_name,value\n");
}

#[test]
fn train_writes_artifacts_and_metrics() {
    let fx = fixture();
    let r = fx.path();
    let out = r.join("run");
    let msg = ok(&pixelda(r, "train", &out, &["--set", "train.sample_interval=2"]));
    assert!(msg.contains("accuracy"), "{msg}");
    for f in ["checkpoint.pxda", "losses.csv", "metrics.csv", "metrics.txt", "samples/step_0000002.ppm", "samples/step_0000004.ppm"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let fx = fixture();
    let r = fx.path();
    let straight = r.join("straight");
    ok(&pixelda(r, "train", &straight, &["--set", "train.total_steps=6"]));
    let split = r.join("split");
    ok(&pixelda(r, "train", &split, &["--set", "train.total_steps=3"]));
    ok(&pixelda(r, "train", &split, &["--set", "train.total_steps=6", "--resume"]));
    for f in ["checkpoint.pxda", "losses.csv", "metrics.csv"] {
        assert_eq!(fs::read(straight.join(f)).unwrap(), fs::read(split.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn resume_without_checkpoint_fails() {
    let fx = fixture();
    let r = fx.path();
    let o = pixelda(r, "train", &r.join("fresh"), &["--resume"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn adapt_keeps_count_and_labels() {
    let fx = fixture();
    let r = fx.path();
    ok(&pixelda(r, "train", &r.join("run"), &[]));
    let ck = format!("data.checkpoint={:?}", r.join("run").display().to_string());
    ok(&pixelda(r, "adapt", &r.join("a0"), &["--set", &ck]));
    ok(&pixelda(r, "adapt", &r.join("a0b"), &["--set", &ck]));
    ok(&pixelda(r, "adapt", &r.join("a1"), &["--set", &ck, "--set", "run.adapt_seed=1"]));
    let rows = read_manifest(r.join("a0/manifest.csv")).unwrap();
    assert_eq!(rows.len(), 12);
    assert!(rows.iter().enumerate().all(|(i, row)| row.label == Some(i % 3)));
    let px = |d: &str| fs::read(r.join(d).join("000000.ppm")).unwrap();
    assert_eq!(px("a0"), px("a0b"));
    assert_ne!(px("a0"), px("a1"));
}

#[test]
fn eval_reports_and_rejects_unlabeled_splits() {
    let fx = fixture();
    let r = fx.path();
    ok(&pixelda(r, "train", &r.join("run"), &[]));
    let ck = "data.checkpoint=\"run/checkpoint.pxda\"";
    let msg = ok(&pixelda(r, "eval", &r.join("ev"), &["--set", ck]));
    assert!(msg.contains("samples: 6"), "{msg}");
    let csv = fs::read_to_string(r.join("ev/metrics.csv")).unwrap();
    assert!(csv.contains("accuracy"), "{csv}");
    let o = pixelda(r, "eval", &r.join("ev2"), &["--set", ck, "--set", "data.test=\"target\""]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("target"), "{}", stderr(&o));
    assert!(!r.join("ev2").exists());
}

#[test]
fn audit_writes_a_three_row_grid() {
    let fx = fixture();
    let r = fx.path();
    ok(&pixelda(r, "train", &r.join("run"), &[]));
    ok(&pixelda(r, "audit", &r.join("au"), &["--set", "data.checkpoint=\"run\"", "--set", "run.audit_count=4"]));
    let csv = fs::read_to_string(r.join("au/nn_audit.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    let grid = pixelda_core::data::pnm::read_image(r.join("au/nn_audit.ppm")).unwrap();
    let tiled = |n: usize, gap: usize| n * 8 + (n + 1) * gap;
    assert!((0..4).any(|gap| grid.height == tiled(3, gap) && grid.width == tiled(4, gap)), "{}x{}", grid.height, grid.width);
}

#[test]
fn stability_runs_every_seed() {
    let fx = fixture();
    let r = fx.path();
    ok(&pixelda(r, "stability", &r.join("st"), &["--set", "run.seeds=[3, 4]", "--set", "train.total_steps=2"]));
    let csv = fs::read_to_string(r.join("st/stability.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("3,")) && csv.lines().any(|l| l.starts_with("4,")), "{csv}");
    assert!(r.join("st/stability.txt").is_file());
}

#[test]
fn unknown_keys_leave_no_output() {
    let fx = fixture();
    let r = fx.path();
    let o = pixelda(r, "train", &r.join("bad"), &["--set", "train.learning_rat=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rat"), "{}", stderr(&o));
    assert!(!r.join("bad").exists());
    let o = pixelda(r, "train", &r.join("bad"), &["--set", "train.learning_rate=-1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!r.join("bad").exists());
}

#[test]
fn usage_errors_exit_two() {
    let o = Command::new(env!("CARGO_BIN_EXE_pixelda")).arg("fly").arg("--out").arg("x").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_pixelda")).arg("train").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn echoed_config_reproduces_the_run() {
    let fx = fixture();
    let r = fx.path();
    ok(&pixelda(r, "train", &r.join("first"), &["--set", "train.seed=5", "--set", "loss.alpha=0.5"]));
    let again = Command::new(env!("CARGO_BIN_EXE_pixelda"))
        .args(["train", "--config"])
        .arg(r.join("first/config.toml"))
        .arg("--out")
        .arg(r.join("second"))
        .output()
        .unwrap();
    ok(&again);
    assert_eq!(fs::read(r.join("first/checkpoint.pxda")).unwrap(), fs::read(r.join("second/checkpoint.pxda")).unwrap());
    assert_eq!(fs::read(r.join("first/config.toml")).unwrap(), fs::read(r.join("second/config.toml")).unwrap());
}

#[test]
fn data_root_comes_from_the_environment() {
    let fx = fixture();
    let r = fx.path();
    let text = fs::read_to_string(r.join("run.toml")).unwrap();
    let text: String = text.lines().filter(|l| !l.starts_with("root")).map(|l| format!("{l}\n")).collect();
    fs::write(r.join("noroot.toml"), text).unwrap();
    let run = |env: Option<&Path>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_pixelda"));
        c.args(["synth", "--config"]).arg(r.join("noroot.toml")).arg("--out").arg(r.join("s"));
        match env {
            Some(p) => c.env("PIXELDA_DATA_ROOT", p),
            None => c.env_remove("PIXELDA_DATA_ROOT"),
        };
        c.current_dir(std::env::temp_dir()).output().unwrap()
    };
    assert_eq!(run(None).status.code(), Some(3));
    ok(&run(Some(r)));
    let echoed = fs::read_to_string(r.join("s/config.toml")).unwrap();
    assert!(echoed.contains(&r.display().to_string()), "{echoed}");
}

#[test]
fn profile_values() {
    let fx = fixture();
    let r = fx.path();
    fs::write(r.join("lm.toml"), "[train]\nprofile = \"linemod\"\n[data]\nsource = \"nowhere\"\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_pixelda"))
        .args(["eval", "--config"])
        .arg(r.join("lm.toml"))
        .arg("--out")
        .arg(r.join("lm"))
        .output()
        .unwrap();
    // Fails for lack of a checkpoint, after the profile resolved and validated.
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("data.checkpoint"), "{}", stderr(&o));
}
