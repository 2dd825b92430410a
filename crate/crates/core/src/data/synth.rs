//! Composite target-domain synthesis: a binarized digit inverts the colors of a background crop.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::pnm::read_image;
use crate::data::{Dataset, Domain, Image, LabeledImage};
use crate::error::{io_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    pub background_dir: PathBuf,
    /// Side of the square crop; must equal the digit image size.
    pub crop_size: usize,
    /// Mask is on where intensity > threshold * 255.
    pub threshold: f64,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig { background_dir: PathBuf::from("backgrounds"), crop_size: 28, threshold: 0.5, seed: 0 }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("synth.threshold {} not in (0, 1)", self.threshold)));
        }
        if self.crop_size == 0 {
            return Err(Error::Config("synth.crop_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// `255 - background` where the digit is brighter than `threshold * 255`, background elsewhere.
pub fn synthesize_composite(digit: &Image, background: &Image, threshold: f64) -> Result<Image> {
    if (digit.height, digit.width) != (background.height, background.width) {
        return Err(Error::Invalid(format!(
            "digit {}x{} vs background crop {}x{}",
            digit.height, digit.width, background.height, background.width
        )));
    }
    let cut = threshold * 255.0;
    let lum = digit.luminance();
    let c = background.channels;
    let mut out = background.clone();
    for (p, &v) in lum.iter().enumerate() {
        if v as f64 > cut {
            for px in &mut out.data[p * c..(p + 1) * c] {
                *px = 255 - *px;
            }
        }
    }
    Ok(out)
}

/// Uniformly placed `size x size` crop.
pub fn random_crop<R: Rng + ?Sized>(im: &Image, size: usize, rng: &mut R) -> Result<Image> {
    if size > im.height || size > im.width {
        return Err(Error::Invalid(format!("crop {size} exceeds background {}x{}", im.height, im.width)));
    }
    let y0 = rng.random_range(0..=im.height - size);
    let x0 = rng.random_range(0..=im.width - size);
    let c = im.channels;
    let mut data = Vec::with_capacity(size * size * c);
    for y in y0..y0 + size {
        let row = (y * im.width + x0) * c;
        data.extend_from_slice(&im.data[row..row + size * c]);
    }
    Ok(Image { height: size, width: size, channels: c, data })
}

/// Every PGM/PPM in `dir`, sorted by file name, as RGB.
pub fn load_backgrounds(dir: impl AsRef<Path>) -> Result<Vec<Image>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Io {
            path: dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no PGM/PPM background images"),
        });
    }
    paths.iter().map(|p| read_image(p).map(|im| im.replicate(3))).collect()
}

/// One composite per source image, each over an independently drawn crop (backgrounds drawn
/// with replacement). Labels are kept only when `labeled` is set.
pub fn build_synthetic_target_set(
    source: &Dataset,
    backgrounds: &[Image],
    cfg: &SynthesisConfig,
    split: &str,
    labeled: bool,
) -> Result<Dataset> {
    cfg.validate()?;
    if backgrounds.is_empty() {
        return Err(Error::Invalid("no background images".into()));
    }
    if let Some(bad) = backgrounds.iter().find(|b| b.height < cfg.crop_size || b.width < cfg.crop_size) {
        return Err(Error::Invalid(format!("background {}x{} smaller than crop {}", bad.height, bad.width, cfg.crop_size)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut items = Vec::with_capacity(source.len());
    for (i, it) in source.items().iter().enumerate() {
        let bg = &backgrounds[rng.random_range(0..backgrounds.len())];
        let crop = random_crop(bg, cfg.crop_size, &mut rng)?;
        let pixels = synthesize_composite(&it.pixels, &crop, cfg.threshold)?;
        items.push(LabeledImage { pixels, label: source.label(i), pose: None, mask: None, depth: None });
    }
    if labeled {
        Dataset::labeled(split, Domain::Target, source.class_count, items)
    } else {
        Dataset::unlabeled(split, Domain::Target, source.class_count, items)
    }
}
