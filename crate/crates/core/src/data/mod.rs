//! Images, datasets, file formats, synthesis and batching.

mod batch;
pub mod idx;
mod manifest;
pub mod pnm;
mod synth;

pub use batch::{denormalize, denormalize_depth, images_from_tensor, normalize, normalize_depth, sample_noise, Batch, BatchIterator, IteratorState};
pub use manifest::{load_image_dir, read_manifest, write_image_dir, write_manifest, ManifestRow, MANIFEST_NAME};
pub use synth::{build_synthetic_target_set, load_backgrounds, random_crop, synthesize_composite, SynthesisConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quaternion::Quaternion;

/// 8-bit image stored row-major with interleaved channels (`H x W x C`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 || data.len() != height * width * channels {
            return Err(Error::Invalid(format!(
                "image {height}x{width}x{channels} with {} bytes",
                data.len()
            )));
        }
        Ok(Image { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: u8) -> Self {
        Image { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Replicates a single-channel image into `channels` identical planes.
    pub fn replicate(&self, channels: usize) -> Image {
        if self.channels == channels {
            return self.clone();
        }
        let data = (0..self.height * self.width)
            .flat_map(|p| {
                let v = self.data[p * self.channels];
                std::iter::repeat_n(v, channels)
            })
            .collect();
        Image { height: self.height, width: self.width, channels, data }
    }

    /// Per-pixel mean over channels.
    pub fn luminance(&self) -> Vec<u8> {
        self.data
            .chunks(self.channels)
            .map(|px| (px.iter().map(|&v| v as u32).sum::<u32>() / self.channels as u32) as u8)
            .collect()
    }
}

/// Binary foreground plane (`H x W`, values 0 or 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Invalid(format!("mask {height}x{width} with {} values", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Invalid("mask values must be 0 or 1".into()));
        }
        Ok(Mask { height, width, data })
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Mask { height, width, data: vec![1; height * width] }
    }

    /// Total pixel count `k` of the plane.
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: Image,
    /// `None` for samples of an unlabeled split.
    pub label: Option<usize>,
    pub pose: Option<Quaternion>,
    pub mask: Option<Mask>,
    /// Optional 16-bit depth plane, appended as an extra channel when batched.
    pub depth: Option<Vec<u16>>,
}

impl LabeledImage {
    pub fn new(pixels: Image, label: usize) -> Self {
        LabeledImage { pixels, label: Some(label), pose: None, mask: None, depth: None }
    }

    /// Channels seen by the networks (pixel channels plus depth).
    pub fn tensor_channels(&self) -> usize {
        self.pixels.channels + usize::from(self.depth.is_some())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: String,
    pub domain: Domain,
    pub class_count: usize,
    items: Vec<LabeledImage>,
    labeled: bool,
}

impl Dataset {
    /// Labeled split; every item must carry a label below `class_count`.
    pub fn labeled(split: impl Into<String>, domain: Domain, class_count: usize, items: Vec<LabeledImage>) -> Result<Self> {
        let split = split.into();
        for (i, it) in items.iter().enumerate() {
            match it.label {
                Some(l) if l < class_count => {}
                Some(l) => return Err(Error::Invalid(format!("{split}[{i}]: label {l} >= class count {class_count}"))),
                None => return Err(Error::Invalid(format!("{split}[{i}]: missing label"))),
            }
        }
        let ds = Dataset { split, domain, class_count, items, labeled: true };
        ds.check_uniform()?;
        Ok(ds)
    }

    /// Unlabeled split: labels and poses are stripped so they cannot reach training.
    pub fn unlabeled(split: impl Into<String>, domain: Domain, class_count: usize, mut items: Vec<LabeledImage>) -> Result<Self> {
        for it in &mut items {
            it.label = None;
            it.pose = None;
        }
        let ds = Dataset { split: split.into(), domain, class_count, items, labeled: false };
        ds.check_uniform()?;
        Ok(ds)
    }

    fn check_uniform(&self) -> Result<()> {
        let Some(first) = self.items.first() else { return Ok(()) };
        let key = |it: &LabeledImage| (it.pixels.height, it.pixels.width, it.tensor_channels());
        for (i, it) in self.items.iter().enumerate() {
            if key(it) != key(first) {
                return Err(Error::Invalid(format!("{}[{i}]: shape {:?} differs from {:?}", self.split, key(it), key(first))));
            }
            if let Some(m) = &it.mask {
                if (m.height, m.width) != (it.pixels.height, it.pixels.width) {
                    return Err(Error::Invalid(format!("{}[{i}]: mask shape differs from image", self.split)));
                }
            }
            if let Some(d) = &it.depth {
                if d.len() != it.pixels.height * it.pixels.width {
                    return Err(Error::Invalid(format!("{}[{i}]: depth plane size", self.split)));
                }
            }
        }
        let poses = self.items.iter().filter(|it| it.pose.is_some()).count();
        if poses != 0 && poses != self.items.len() {
            return Err(Error::Invalid(format!("{}: pose present on only some items", self.split)));
        }
        Ok(())
    }

    pub fn is_labeled(&self) -> bool {
        self.labeled
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[LabeledImage] {
        &self.items
    }

    pub fn get(&self, i: usize) -> &LabeledImage {
        &self.items[i]
    }

    /// Label of item `i`, or `None` for an unlabeled split.
    pub fn label(&self, i: usize) -> Option<usize> {
        if self.labeled {
            self.items[i].label
        } else {
            None
        }
    }

    pub fn require_labels(&self) -> Result<()> {
        if self.labeled {
            Ok(())
        } else {
            Err(Error::Unlabeled(self.split.clone()))
        }
    }

    pub fn has_poses(&self) -> bool {
        self.items.first().is_some_and(|it| it.pose.is_some())
    }

    pub fn has_masks(&self) -> bool {
        !self.items.is_empty() && self.items.iter().all(|it| it.mask.is_some())
    }

    /// `[channels, height, width]` as seen by the networks.
    pub fn image_shape(&self) -> Option<[usize; 3]> {
        self.items.first().map(|it| [it.tensor_channels(), it.pixels.height, it.pixels.width])
    }

    /// New split holding the items at `indices`, preserving labeled status.
    pub fn subset(&self, split: impl Into<String>, indices: &[usize]) -> Dataset {
        Dataset {
            split: split.into(),
            domain: self.domain,
            class_count: self.class_count,
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
            labeled: self.labeled,
        }
    }

    /// Items whose label satisfies `keep`. Labels are required.
    pub fn filter_classes(&self, split: impl Into<String>, keep: impl Fn(usize) -> bool) -> Result<Dataset> {
        self.require_labels()?;
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.items[i].label.unwrap())).collect();
        Ok(self.subset(split, &idx))
    }

    pub fn into_items(self) -> Vec<LabeledImage> {
        self.items
    }
}
