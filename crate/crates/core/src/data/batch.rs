use pixelda_tensor::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Image};
use crate::error::{Error, Result};

/// `v / 127.5 - 1`, mapping `[0, 255]` onto `[-1, 1]`.
pub fn normalize(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

/// Inverse of [`normalize`], rounded to nearest and clamped.
pub fn denormalize(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn normalize_depth(v: u16) -> f64 {
    v as f64 / 32767.5 - 1.0
}

pub fn denormalize_depth(v: f64) -> u16 {
    ((v + 1.0) * 32767.5).round().clamp(0.0, 65535.0) as u16
}

/// `[batch, dim]` noise, uniform and strictly inside (-1, 1) in the target precision.
pub fn sample_noise<T: Scalar, R: Rng + ?Sized>(batch: usize, dim: usize, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn([batch, dim], |_| loop {
        let v = T::lit(rng.random_range(-1.0..1.0));
        if v.abs() < T::one() {
            break v;
        }
    })
}

/// Converts `[B, C, H, W]` values in `[-1, 1]` back to 8-bit images. With
/// `C == pixel_channels + 1` the last channel is returned as a 16-bit depth plane.
pub fn images_from_tensor<T: Scalar>(t: &Tensor<T>, pixel_channels: usize) -> Result<Vec<(Image, Option<Vec<u16>>)>> {
    if t.rank() != 4 || !(t.dim(1) == pixel_channels || t.dim(1) == pixel_channels + 1) || pixel_channels == 0 {
        return Err(Error::Invalid(format!("cannot view {:?} as {pixel_channels}-channel images", t.shape())));
    }
    let (b, c, h, w) = (t.dim(0), t.dim(1), t.dim(2), t.dim(3));
    let plane = h * w;
    let d = t.data();
    Ok((0..b)
        .map(|n| {
            let base = n * c * plane;
            let mut data = vec![0u8; plane * pixel_channels];
            for ch in 0..pixel_channels {
                for p in 0..plane {
                    data[p * pixel_channels + ch] = denormalize(d[base + ch * plane + p].as_f64());
                }
            }
            let depth = (c > pixel_channels)
                .then(|| (0..plane).map(|p| denormalize_depth(d[base + pixel_channels * plane + p].as_f64())).collect());
            (Image { height: h, width: w, channels: pixel_channels, data }, depth)
        })
        .collect())
}

/// Network-ready tensors for a set of dataset items.
#[derive(Debug, Clone)]
pub struct Batch<T: Scalar = f32> {
    pub indices: Vec<usize>,
    /// `[B, C, H, W]` in `[-1, 1]`; depth, when present, is the last channel.
    pub images: Tensor<T>,
    /// Absent for unlabeled splits.
    pub labels: Option<Vec<usize>>,
    pub onehot: Option<Tensor<T>>,
    /// `[B, 4]` unit quaternions.
    pub poses: Option<Tensor<T>>,
    /// `[B, 1, H, W]` binary masks.
    pub masks: Option<Tensor<T>>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_dataset(ds: &Dataset, indices: &[usize]) -> Result<Self> {
        let shape = ds.image_shape().ok_or_else(|| Error::Invalid(format!("split '{}' is empty", ds.split)))?;
        let [c, h, w] = shape;
        let plane = h * w;
        let mut images = Vec::with_capacity(indices.len() * c * plane);
        for &i in indices {
            let it = ds.get(i);
            let px = &it.pixels;
            for ch in 0..px.channels {
                images.extend((0..plane).map(|p| T::lit(normalize(px.data[p * px.channels + ch]))));
            }
            if let Some(d) = &it.depth {
                images.extend(d.iter().map(|&v| T::lit(normalize_depth(v))));
            }
        }
        let b = indices.len();
        let images = Tensor::new([b, c, h, w], images)?;
        let labels: Option<Vec<usize>> = indices.iter().map(|&i| ds.label(i)).collect();
        let onehot = labels.as_ref().map(|ls| {
            let k = ds.class_count;
            Tensor::from_fn([b, k], |j| if ls[j / k] == j % k { T::one() } else { T::zero() })
        });
        let poses = if ds.is_labeled() && ds.has_poses() {
            let v: Vec<f64> = indices.iter().flat_map(|&i| ds.get(i).pose.unwrap().to_array()).collect();
            Some(Tensor::from_f64([b, 4], &v)?)
        } else {
            None
        };
        let masks = if indices.iter().all(|&i| ds.get(i).mask.is_some()) && b > 0 {
            let v: Vec<T> = indices.iter().flat_map(|&i| ds.get(i).mask.as_ref().unwrap().data.iter().map(|&m| T::lit(m as f64))).collect();
            Some(Tensor::new([b, 1, h, w], v)?)
        } else {
            None
        };
        Ok(Batch { indices: indices.to_vec(), images, labels, onehot, poses, masks })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Resumable position of a [`BatchIterator`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IteratorState {
    pub epoch: u64,
    pub cursor: usize,
}

/// Epoch-wise shuffled index batches; the final partial batch of each epoch is dropped.
/// The order of epoch `e` depends only on `(seed, e)`.
#[derive(Debug, Clone)]
pub struct BatchIterator {
    len: usize,
    batch_size: usize,
    seed: u64,
    epochs: Option<u64>,
    state: IteratorState,
    order: Vec<usize>,
}

impl BatchIterator {
    pub fn new(len: usize, batch_size: usize, seed: u64, epochs: Option<u64>) -> Result<Self> {
        if len == 0 {
            return Err(Error::Invalid("batch iterator over an empty dataset".into()));
        }
        if batch_size == 0 || batch_size > len {
            return Err(Error::Invalid(format!("batch size {batch_size} for a dataset of {len}")));
        }
        let mut it = BatchIterator { len, batch_size, seed, epochs, state: IteratorState { epoch: 0, cursor: 0 }, order: Vec::new() };
        it.shuffle();
        Ok(it)
    }

    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.state.epoch);
        self.order = (0..self.len).collect();
        self.order.shuffle(&mut rng);
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len / self.batch_size
    }

    pub fn state(&self) -> IteratorState {
        self.state
    }

    pub fn restore(&mut self, state: IteratorState) -> Result<()> {
        if state.cursor > self.batches_per_epoch() * self.batch_size || state.cursor % self.batch_size != 0 {
            return Err(Error::Invalid(format!("iterator cursor {} invalid", state.cursor)));
        }
        self.state = state;
        self.shuffle();
        Ok(())
    }

    pub fn next_batch<T: Scalar>(&mut self, ds: &Dataset) -> Result<Option<Batch<T>>> {
        match self.next() {
            Some(idx) => Batch::from_dataset(ds, &idx).map(Some),
            None => Ok(None),
        }
    }
}

impl Iterator for BatchIterator {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.state.cursor + self.batch_size > self.len {
            self.state.epoch += 1;
            self.state.cursor = 0;
            self.shuffle();
        }
        if self.epochs.is_some_and(|e| self.state.epoch >= e) {
            return None;
        }
        let start = self.state.cursor;
        self.state.cursor += self.batch_size;
        Some(self.order[start..start + self.batch_size].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_bounds_and_bijection() {
        assert_eq!(normalize(0), -1.0);
        assert_eq!(normalize(255), 1.0);
        for v in 0..=255u8 {
            assert_eq!(denormalize(normalize(v)), v);
            assert_eq!(denormalize(normalize(v) as f32 as f64), v);
        }
        assert_eq!(denormalize(3.0), 255);
        assert_eq!(denormalize(-3.0), 0);
    }

    #[test]
    fn drop_remainder() {
        let it = BatchIterator::new(70, 32, 1, Some(1)).unwrap();
        let batches: Vec<_> = it.collect();
        assert_eq!(batches.len(), 2);
        let mut seen: Vec<usize> = batches.concat();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 64);
        assert!(BatchIterator::new(0, 1, 0, None).is_err());
        assert!(BatchIterator::new(4, 5, 0, None).is_err());
    }

    #[test]
    fn resume_continues_sequence() {
        let mut a = BatchIterator::new(10, 3, 7, None).unwrap();
        for _ in 0..5 {
            a.next();
        }
        let mut b = BatchIterator::new(10, 3, 7, None).unwrap();
        b.restore(a.state()).unwrap();
        for _ in 0..7 {
            assert_eq!(a.next(), b.next());
        }
    }
}
