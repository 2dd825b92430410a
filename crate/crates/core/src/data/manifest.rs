//! Image-directory datasets: PGM/PPM files plus `manifest.csv`
//! (`filename,label[,qw,qx,qy,qz][,mask_filename]`).

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::pnm::{read_depth, read_image, write_gray16, write_image};
use crate::data::{Dataset, Domain, Image, LabeledImage, Mask};
use crate::error::{format_err, io_err, Result};
use crate::quaternion::Quaternion;

pub const MANIFEST_NAME: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub filename: String,
    /// Empty in the file for unlabeled splits.
    pub label: Option<usize>,
    pub pose: Option<Quaternion>,
    pub mask_filename: Option<String>,
}

fn parse_row(path: &Path, line: usize, rec: &csv::StringRecord) -> Result<ManifestRow> {
    let bad = |what: &str| format_err(path, format!("row {line}: {what}"));
    let fields: Vec<&str> = rec.iter().map(str::trim).collect();
    let (pose, mask) = match fields.len() {
        2 => (None, None),
        3 => (None, Some(fields[2])),
        6 => (Some(&fields[2..6]), None),
        7 => (Some(&fields[2..6]), Some(fields[6])),
        n => return Err(bad(&format!("{n} columns"))),
    };
    let label = match fields[1] {
        "" => None,
        s => Some(s.parse().map_err(|_| bad(&format!("label '{s}'")))?),
    };
    let pose = match pose {
        Some(p) => {
            let v: Vec<f64> = p.iter().map(|s| s.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad("quaternion"))?;
            let q = Quaternion::from_slice(&v);
            if !q.is_unit() {
                return Err(bad("quaternion is not unit length"));
            }
            Some(q)
        }
        None => None,
    };
    if fields[0].is_empty() {
        return Err(bad("empty filename"));
    }
    Ok(ManifestRow {
        filename: fields[0].to_string(),
        label,
        pose,
        mask_filename: mask.filter(|m| !m.is_empty()).map(str::to_string),
    })
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| format_err(path, e.to_string()))?;
        if i == 0 && rec.get(0).map(str::trim) == Some("filename") {
            continue;
        }
        rows.push(parse_row(path, i + 1, &rec)?);
    }
    Ok(rows)
}

pub fn write_manifest(path: impl AsRef<Path>, rows: &[ManifestRow]) -> Result<()> {
    let path = path.as_ref();
    let with_pose = rows.iter().any(|r| r.pose.is_some());
    let with_mask = rows.iter().any(|r| r.mask_filename.is_some());
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    let mut header = vec!["filename", "label"];
    if with_pose {
        header.extend(["qw", "qx", "qy", "qz"]);
    }
    if with_mask {
        header.push("mask_filename");
    }
    let csv_err = |e: csv::Error| format_err(path, e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.filename.clone(), r.label.map(|l| l.to_string()).unwrap_or_default()];
        if with_pose {
            let q = r.pose.ok_or_else(|| format_err(path, format!("{}: missing pose", r.filename)))?;
            // Shortest round-trip formatting keeps the values bit-exact.
            rec.extend(q.to_array().iter().map(|v| format!("{v:?}")));
        }
        if with_mask {
            rec.push(r.mask_filename.clone().unwrap_or_default());
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| format_err(path, e.to_string()))?;
    fs::write(path, bytes).map_err(io_err(path))
}

/// Depth plane stored next to an image as `<stem>_depth.pgm`.
pub fn depth_path(image: &Path) -> PathBuf {
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    image.with_file_name(format!("{stem}_depth.pgm"))
}

fn read_mask(path: &Path, height: usize, width: usize) -> Result<Mask> {
    let im = read_image(path)?;
    if im.channels != 1 || im.height != height || im.width != width {
        return Err(format_err(path, "mask must be a gray image of the same size"));
    }
    Ok(Mask { height, width, data: im.data.iter().map(|&v| u8::from(v > 0)).collect() })
}

/// Loads a manifest directory. Unlabeled splits drop any labels present in the file.
pub fn load_image_dir(dir: impl AsRef<Path>, split: &str, domain: Domain, class_count: usize, labeled: bool) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest = dir.join(MANIFEST_NAME);
    let rows = read_manifest(&manifest)?;
    let mut items = Vec::with_capacity(rows.len());
    for row in rows {
        let ipath = dir.join(&row.filename);
        let pixels = read_image(&ipath)?;
        let mask = match &row.mask_filename {
            Some(m) => Some(read_mask(&dir.join(m), pixels.height, pixels.width)?),
            None => None,
        };
        let dpath = depth_path(&ipath);
        let depth = if dpath.exists() {
            let (h, w, d) = read_depth(&dpath)?;
            if (h, w) != (pixels.height, pixels.width) {
                return Err(format_err(&dpath, "depth plane size differs from image"));
            }
            Some(d)
        } else {
            None
        };
        if labeled && row.label.is_none() {
            return Err(format_err(&manifest, format!("{}: missing label in a labeled split", row.filename)));
        }
        items.push(LabeledImage { pixels, label: row.label, pose: row.pose, mask, depth });
    }
    if labeled {
        Dataset::labeled(split, domain, class_count, items)
    } else {
        Dataset::unlabeled(split, domain, class_count, items)
    }
}

fn image_ext(im: &Image) -> &'static str {
    if im.channels == 1 {
        "pgm"
    } else {
        "ppm"
    }
}

/// Writes every item as `NNNNNN.p[gp]m` (+ `_mask.pgm`, `_depth.pgm`) and the manifest.
pub fn write_image_dir(dir: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut rows = Vec::with_capacity(ds.len());
    for (i, it) in ds.items().iter().enumerate() {
        let name = format!("{i:06}.{}", image_ext(&it.pixels));
        write_image(dir.join(&name), &it.pixels)?;
        let mask_filename = match &it.mask {
            Some(m) => {
                let mname = format!("{i:06}_mask.pgm");
                let im = Image { height: m.height, width: m.width, channels: 1, data: m.data.iter().map(|&v| v * 255).collect() };
                write_image(dir.join(&mname), &im)?;
                Some(mname)
            }
            None => None,
        };
        if let Some(d) = &it.depth {
            write_gray16(depth_path(&dir.join(&name)), it.pixels.height, it.pixels.width, d)?;
        }
        rows.push(ManifestRow { filename: name, label: ds.label(i), pose: it.pose, mask_filename });
    }
    write_manifest(dir.join(MANIFEST_NAME), &rows)
}
