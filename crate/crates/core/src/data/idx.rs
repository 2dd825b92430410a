//! IDX archives (unsigned-byte images `0x803` and labels `0x801`, big-endian header).

use std::fs;
use std::path::Path;

use crate::data::{Dataset, Domain, Image, LabeledImage};
use crate::error::{format_err, io_err, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Decoded IDX payload: declared extents and raw bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxData {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn parse_idx(path: &Path, bytes: &[u8]) -> Result<IdxData> {
    if bytes.len() < 4 {
        return Err(format_err(path, "truncated IDX header"));
    }
    let magic = be_u32(bytes, 0);
    let rank = match magic {
        IMAGE_MAGIC => 3,
        LABEL_MAGIC => 1,
        m => return Err(format_err(path, format!("unsupported IDX magic {m:#010x}"))),
    };
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(format_err(path, "truncated IDX header"));
    }
    let dims: Vec<usize> = (0..rank).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect();
    let total = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format_err(path, format!("IDX dimensions {dims:?} overflow")))?;
    let payload = &bytes[header..];
    if payload.len() < total {
        return Err(format_err(path, format!("truncated IDX payload: {} of {total} bytes", payload.len())));
    }
    if payload.len() > total {
        return Err(format_err(path, format!("{} trailing bytes after IDX payload", payload.len() - total)));
    }
    Ok(IdxData { dims, data: payload.to_vec() })
}

pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxData> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    parse_idx(path, &bytes)
}

pub fn encode_idx(magic: u32, dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + data.len());
    out.extend_from_slice(&magic.to_be_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

/// Writes single-channel `rows x cols` images.
pub fn write_idx_images(path: impl AsRef<Path>, images: &[Image]) -> Result<()> {
    let path = path.as_ref();
    let (rows, cols) = images.first().map_or((0, 0), |im| (im.height, im.width));
    let mut data = Vec::with_capacity(images.len() * rows * cols);
    for im in images {
        if im.channels != 1 || im.height != rows || im.width != cols {
            return Err(format_err(path, "IDX images must be single-channel and equally sized"));
        }
        data.extend_from_slice(&im.data);
    }
    fs::write(path, encode_idx(IMAGE_MAGIC, &[images.len(), rows, cols], &data)).map_err(io_err(path))
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_idx(LABEL_MAGIC, &[labels.len()], labels)).map_err(io_err(path))
}

pub fn read_idx_images(path: impl AsRef<Path>) -> Result<Vec<Image>> {
    let path = path.as_ref();
    let idx = read_idx(path)?;
    if idx.dims.len() != 3 {
        return Err(format_err(path, "expected an IDX image file"));
    }
    let (rows, cols) = (idx.dims[1], idx.dims[2]);
    if rows == 0 || cols == 0 {
        return Err(format_err(path, "zero-sized IDX images"));
    }
    Ok(idx.data.chunks(rows * cols).map(|c| Image { height: rows, width: cols, channels: 1, data: c.to_vec() }).collect())
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let idx = read_idx(path)?;
    if idx.dims.len() != 1 {
        return Err(format_err(path, "expected an IDX label file"));
    }
    Ok(idx.data)
}

/// Loads paired image and label archives as a labeled dataset.
pub fn load_idx_pair(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    split: &str,
    domain: Domain,
    class_count: usize,
) -> Result<Dataset> {
    let ims = read_idx_images(&images)?;
    let lbs = read_idx_labels(&labels)?;
    if ims.len() != lbs.len() {
        return Err(format_err(
            labels.as_ref(),
            format!("{} labels for {} images in {}", lbs.len(), ims.len(), images.as_ref().display()),
        ));
    }
    let items = ims.into_iter().zip(lbs).map(|(im, l)| LabeledImage::new(im, l as usize)).collect();
    Dataset::labeled(split, domain, class_count, items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_magic() {
        let p = Path::new("mem");
        let ok = encode_idx(IMAGE_MAGIC, &[1, 2, 2], &[1, 2, 3, 4]);
        assert_eq!(parse_idx(p, &ok).unwrap().dims, vec![1, 2, 2]);
        // signed-byte (0x09) and float (0x0D) element types are rejected
        for magic in [0x0000_0903u32, 0x0000_0D03, 0x0000_0802, 0] {
            assert!(parse_idx(p, &encode_idx(magic, &[1, 2, 2], &[1, 2, 3, 4])).is_err());
        }
        assert!(parse_idx(p, &ok[..ok.len() - 1]).is_err());
        let huge = encode_idx(IMAGE_MAGIC, &[u32::MAX as usize, u32::MAX as usize, u32::MAX as usize], &[]);
        assert!(parse_idx(p, &huge).is_err());
    }
}
