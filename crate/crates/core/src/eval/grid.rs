//! Image grids: one row per image kind (e.g. source / adapted / nearest neighbor).

use std::path::Path;

use crate::data::pnm::write_image;
use crate::data::Image;
use crate::error::{Error, Result};

/// One grid cell: an 8-bit image and, for RGB-D data, its depth plane rendered as a second tile.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub image: Image,
    pub depth: Option<Vec<u16>>,
}

impl Tile {
    pub fn new(image: Image) -> Self {
        Tile { image, depth: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridImage {
    rows: Vec<Vec<Tile>>,
    tile_h: usize,
    tile_w: usize,
    with_depth: bool,
}

const GAP: usize = 1;

impl GridImage {
    pub fn new(rows: Vec<Vec<Tile>>) -> Result<Self> {
        if rows.is_empty() || rows.len() > 3 {
            return Err(Error::Invalid(format!("grid needs 1 to 3 rows, got {}", rows.len())));
        }
        let first = rows.iter().flatten().next().ok_or_else(|| Error::Invalid("grid without tiles".into()))?;
        let (tile_h, tile_w) = (first.image.height, first.image.width);
        let with_depth = first.depth.is_some();
        for t in rows.iter().flatten() {
            if (t.image.height, t.image.width) != (tile_h, tile_w) || t.depth.is_some() != with_depth {
                return Err(Error::Invalid("grid tiles differ in size or depth".into()));
            }
            if !matches!(t.image.channels, 1 | 3) {
                return Err(Error::Invalid(format!("{}-channel tile", t.image.channels)));
            }
        }
        Ok(GridImage { rows, tile_h, tile_w, with_depth })
    }

    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    /// Composes the grid into one RGB image with white separators.
    pub fn render(&self) -> Image {
        let cell_w = self.tile_w * if self.with_depth { 2 } else { 1 };
        let cols = self.rows.iter().map(Vec::len).max().unwrap_or(0);
        let width = cols * cell_w + (cols + 1) * GAP;
        let height = self.rows.len() * self.tile_h + (self.rows.len() + 1) * GAP;
        let mut out = Image::filled(height, width, 3, 255);
        for (r, row) in self.rows.iter().enumerate() {
            let y0 = GAP + r * (self.tile_h + GAP);
            for (c, tile) in row.iter().enumerate() {
                let x0 = GAP + c * (cell_w + GAP);
                let im = &tile.image;
                for y in 0..self.tile_h {
                    for x in 0..self.tile_w {
                        for ch in 0..3 {
                            out.set(y0 + y, x0 + x, ch, im.get(y, x, ch.min(im.channels - 1)));
                        }
                        if let Some(d) = &tile.depth {
                            let v = (d[y * self.tile_w + x] >> 8) as u8;
                            for ch in 0..3 {
                                out.set(y0 + y, x0 + self.tile_w + x, ch, v);
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_image(path, &self.render())
    }
}
