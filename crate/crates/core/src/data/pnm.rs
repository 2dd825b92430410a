//! Binary PGM (P5, 8- or 16-bit) and PPM (P6, 8-bit) images.

use std::fs;
use std::path::Path;

use crate::data::Image;
use crate::error::{format_err, io_err, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Pnm {
    /// 8-bit gray or RGB.
    Bytes(Image),
    /// 16-bit gray, e.g. a depth plane.
    Gray16 { height: usize, width: usize, data: Vec<u16> },
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    offset: usize,
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || bytes[0] != b'P' || !matches!(bytes[1], b'5' | b'6') {
        return Err(format_err(path, "not a binary PGM/PPM file"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "malformed PNM header"));
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| format_err(path, "PNM header value out of range"))?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format_err(path, "malformed PNM header"));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(format_err(path, format!("unsupported PNM geometry {width}x{height} maxval {maxval}")));
    }
    Ok(Header { magic: [bytes[0], bytes[1]], width, height, maxval, offset: pos + 1 })
}

pub fn parse_pnm(path: &Path, bytes: &[u8]) -> Result<Pnm> {
    let h = parse_header(path, bytes)?;
    let channels = if h.magic[1] == b'6' { 3 } else { 1 };
    let wide = h.maxval > 255;
    if wide && channels == 3 {
        return Err(format_err(path, "16-bit PPM is not supported"));
    }
    let n = h.width * h.height * channels * if wide { 2 } else { 1 };
    let payload = &bytes[h.offset..];
    if payload.len() != n {
        return Err(format_err(path, format!("PNM payload has {} bytes, expected {n}", payload.len())));
    }
    if wide {
        let data = payload.chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
        Ok(Pnm::Gray16 { height: h.height, width: h.width, data })
    } else {
        Ok(Pnm::Bytes(Image { height: h.height, width: h.width, channels, data: payload.to_vec() }))
    }
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<Pnm> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    parse_pnm(path, &bytes)
}

/// Reads an 8-bit gray or RGB image.
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    match read_pnm(&path)? {
        Pnm::Bytes(im) => Ok(im),
        Pnm::Gray16 { .. } => Err(format_err(path.as_ref(), "expected an 8-bit image")),
    }
}

/// Reads a 16-bit (or 8-bit, widened) gray plane.
pub fn read_depth(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u16>)> {
    match read_pnm(&path)? {
        Pnm::Gray16 { height, width, data } => Ok((height, width, data)),
        Pnm::Bytes(im) if im.channels == 1 => Ok((im.height, im.width, im.data.iter().map(|&v| v as u16).collect())),
        Pnm::Bytes(_) => Err(format_err(path.as_ref(), "depth must be a gray image")),
    }
}

pub fn encode_image(im: &Image) -> Result<Vec<u8>> {
    let magic = match im.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(crate::Error::Invalid(format!("cannot encode {c}-channel image as PNM"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", im.width, im.height).into_bytes();
    out.extend_from_slice(&im.data);
    Ok(out)
}

pub fn encode_gray16(height: usize, width: usize, data: &[u16]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for v in data {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

pub fn write_image(path: impl AsRef<Path>, im: &Image) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_image(im)?).map_err(io_err(path))
}

pub fn write_gray16(path: impl AsRef<Path>, height: usize, width: usize, data: &[u16]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_gray16(height, width, data)).map_err(io_err(path))
}
