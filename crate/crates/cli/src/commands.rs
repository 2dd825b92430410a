use std::fs;
use std::path::{Path, PathBuf};

use pixelda_core::data::idx::{read_idx_images, read_idx_labels};
use pixelda_core::data::{build_synthetic_target_set, load_backgrounds, load_image_dir, read_manifest, write_image_dir, Dataset, Domain, LabeledImage};
use pixelda_core::eval::{adapt_dataset, evaluate, nn_audit, stability_study, write_report};
use pixelda_core::trainer::{run_training, Checkpoint, RunOptions, TrainData, Trainer, CHECKPOINT_FILE};
use pixelda_core::{Error, Result};

use crate::config::{RunConfig, ECHO_FILE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    /// Composite digits onto background crops.
    Synth,
    /// Train G, D and T.
    Train,
    /// Run a split through a trained generator.
    Adapt,
    /// Score a trained classifier on a labeled split.
    Eval,
    /// Nearest-neighbor audit of generated images.
    Audit,
    /// Repeat training over several seeds.
    Stability,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

/// Where a split lives, as named in the `data` section.
struct SplitRef<'a> {
    key: &'static str,
    path: Option<&'a PathBuf>,
    labels: Option<&'a PathBuf>,
}

impl RunConfig {
    fn split_ref(&self, key: &'static str) -> SplitRef<'_> {
        let d = &self.data;
        let (path, labels) = match key {
            "source" => (d.source.as_ref(), d.source_labels.as_ref()),
            "target" => (d.target.as_ref(), d.target_labels.as_ref()),
            "labeled_target" => (d.labeled_target.as_ref(), d.labeled_target_labels.as_ref()),
            "test" => (d.test.as_ref(), d.test_labels.as_ref()),
            _ => unreachable!("unknown split key {key}"),
        };
        SplitRef { key, path, labels }
    }

    fn required(&self, key: &'static str, labeled: bool) -> Result<Dataset> {
        let r = self.split_ref(key);
        if r.path.is_none() {
            return Err(Error::Config(format!("data.{key} is required for this command")));
        }
        self.load_split(r, labeled)
    }

    fn optional(&self, key: &'static str, labeled: bool) -> Result<Option<Dataset>> {
        let r = self.split_ref(key);
        if r.path.is_none() {
            return Ok(None);
        }
        self.load_split(r, labeled).map(Some)
    }

    /// IDX image archives when the path is a file, manifest directories otherwise.
    /// Gray images are replicated to the configured channel count.
    fn load_split(&self, r: SplitRef, labeled: bool) -> Result<Dataset> {
        let k = self.classifier.class_count;
        let domain = if r.key == "source" { Domain::Source } else { Domain::Target };
        let path = self.resolve(r.path.expect("checked by caller"));
        let ds = if path.is_file() {
            let images = read_idx_images(&path)?;
            let labels = match r.labels {
                Some(l) => {
                    let lp = self.resolve(l);
                    let lbs = read_idx_labels(&lp)?;
                    if lbs.len() != images.len() {
                        return Err(Error::Format { path: lp, detail: format!("{} labels for {} images", lbs.len(), images.len()) });
                    }
                    Some(lbs)
                }
                None if labeled => return Err(Error::Unlabeled(format!("{} ({}): no data.{}_labels", r.key, path.display(), r.key))),
                None => None,
            };
            let items = images
                .into_iter()
                .enumerate()
                .map(|(i, im)| LabeledImage::new(im, labels.as_ref().map_or(0, |l| l[i] as usize)))
                .collect();
            if labeled {
                Dataset::labeled(r.key, domain, k, items)?
            } else {
                Dataset::unlabeled(r.key, domain, k, items)?
            }
        } else {
            if labeled {
                let manifest = path.join(pixelda_core::data::MANIFEST_NAME);
                if read_manifest(&manifest)?.iter().any(|row| row.label.is_none()) {
                    return Err(Error::Unlabeled(format!("{} ({})", r.key, path.display())));
                }
            }
            load_image_dir(&path, r.key, domain, k, labeled)?
        };
        Ok(self.fit_channels(ds))
    }

    fn fit_channels(&self, ds: Dataset) -> Dataset {
        let want = self.generator.image_channels;
        let fix = ds.items().iter().any(|it| it.pixels.channels == 1 && it.tensor_channels() < want);
        if !fix {
            return ds;
        }
        let (split, domain, k, labeled) = (ds.split.clone(), ds.domain, ds.class_count, ds.is_labeled());
        let items: Vec<LabeledImage> = ds
            .into_items()
            .into_iter()
            .map(|mut it| {
                if it.pixels.channels == 1 {
                    it.pixels = it.pixels.replicate(want - usize::from(it.depth.is_some()));
                }
                it
            })
            .collect();
        let out = if labeled { Dataset::labeled(split, domain, k, items) } else { Dataset::unlabeled(split, domain, k, items) };
        out.expect("relabeling an existing split")
    }

    fn checkpoint_file(&self) -> Result<Checkpoint> {
        let p = self.data.checkpoint.as_ref().ok_or_else(|| Error::Config("data.checkpoint is required for this command".into()))?;
        let p = self.resolve(p);
        let p = if p.is_dir() { p.join(CHECKPOINT_FILE) } else { p };
        Checkpoint::load(&p)
    }
}

/// Creates `out` and echoes the effective configuration into it.
fn prepare_out(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(io(out))?;
    let p = out.join(ECHO_FILE);
    fs::write(&p, cfg.echo()?).map_err(io(&p))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io(path))
}

/// Runs `cmd`. Every input is loaded and checked before anything is written to `out`.
pub fn run(cmd: Command, cfg: &RunConfig, out: &Path, resume: bool) -> Result<String> {
    let exp = cfg.experiment();
    match cmd {
        Command::Synth => {
            let source = cfg.required("source", true)?;
            let syn = cfg.synthesis();
            let bgs = load_backgrounds(&syn.background_dir)?;
            let ds = build_synthetic_target_set(&source, &bgs, &syn, "synthetic", cfg.synth.labeled)?;
            prepare_out(cfg, out)?;
            write_image_dir(out, &ds)?;
            Ok(format!("wrote {} composites (seed {}) to {}", ds.len(), syn.seed, out.display()))
        }
        Command::Train => {
            let source = cfg.required("source", true)?;
            let target = cfg.required("target", false)?;
            let labeled_target = cfg.optional("labeled_target", true)?;
            let test = cfg.optional("test", true)?;
            let data = TrainData { source: &source, target: &target, labeled_target: labeled_target.as_ref() };
            let mut trainer = if resume {
                let ckpt = Checkpoint::load(out.join(CHECKPOINT_FILE))?;
                Trainer::from_checkpoint(exp.clone(), &data, &ckpt)?
            } else {
                Trainer::new(exp.clone(), &data)?
            };
            prepare_out(cfg, out)?;
            run_training(&mut trainer, &data, &RunOptions { out_dir: Some(out.to_path_buf()) })?;
            let mut msg = format!("trained to step {} in {}", trainer.step(), out.display());
            if let Some(test) = &test {
                let report = evaluate(&trainer.classifier, test, trainer.eval_stream())?.tagged(&exp);
                write_report(out, "metrics", &report)?;
                msg.push('\n');
                msg.push_str(&report.summary());
            }
            Ok(msg)
        }
        Command::Adapt => {
            let ckpt = cfg.checkpoint_file()?;
            let g = exp.load_generator(&ckpt)?;
            // Labels are carried through when the split has them.
            let source = match cfg.required("source", true) {
                Err(Error::Unlabeled(_)) => cfg.required("source", false)?,
                other => other?,
            };
            let ds = adapt_dataset(&g, &source, cfg.run.adapt_seed)?;
            prepare_out(cfg, out)?;
            write_image_dir(out, &ds)?;
            Ok(format!("adapted {} images (seed {}) to {}", ds.len(), cfg.run.adapt_seed, out.display()))
        }
        Command::Eval => {
            let ckpt = cfg.checkpoint_file()?;
            let t = exp.load_classifier(&ckpt)?;
            let test = cfg.required("test", true)?;
            let stream = cfg.run.stream.unwrap_or_else(|| exp.target_stream(cfg.data.labeled_target.is_some()));
            let report = evaluate(&t, &test, stream)?.tagged(&exp);
            prepare_out(cfg, out)?;
            write_report(out, "metrics", &report)?;
            Ok(report.summary())
        }
        Command::Audit => {
            let ckpt = cfg.checkpoint_file()?;
            let g = exp.load_generator(&ckpt)?;
            let source = cfg.required("source", false)?;
            let target = cfg.required("target", false)?;
            let report = nn_audit(&g, &source, &target, cfg.run.audit_count, cfg.run.adapt_seed)?;
            prepare_out(cfg, out)?;
            report.write_csv(out.join("nn_audit.csv"))?;
            report.grid.save(out.join("nn_audit.ppm"))?;
            let mean = report.matches.iter().map(|m| m.distance).sum::<f64>() / report.matches.len() as f64;
            Ok(format!("audited {} samples, mean nearest-neighbor distance {mean:.4}", report.matches.len()))
        }
        Command::Stability => {
            let source = cfg.required("source", true)?;
            let target = cfg.required("target", false)?;
            let labeled_target = cfg.optional("labeled_target", true)?;
            let test = cfg.required("test", true)?;
            let data = TrainData { source: &source, target: &target, labeled_target: labeled_target.as_ref() };
            data.validate(&exp)?;
            let report = stability_study(&exp, &cfg.run.seeds, &data, &test)?;
            prepare_out(cfg, out)?;
            report.write_csv(out.join("stability.csv"))?;
            let summary = report.summary();
            write_text(&out.join("stability.txt"), &summary)?;
            Ok(summary)
        }
    }
}
