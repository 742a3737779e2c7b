//! Grayscale PNG montages: one row per case, tiles side by side.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

const GAP: usize = 2;

/// One tile: an `h x w` image with values in `[0, 1]` (clipped).
pub struct Tile<'a> {
    pub pixels: &'a [f64],
}

/// `|a - b|` per pixel.
pub fn abs_error(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect()
}

/// Writes `rows` of equally sized `h x w` tiles as an 8-bit PNG with a
/// small black gap between tiles.
pub fn write_montage(path: &Path, rows: &[Vec<Tile<'_>>], h: usize, w: usize) -> Result<()> {
    let ncols = rows.iter().map(Vec::len).max().unwrap_or(0);
    if rows.is_empty() || ncols == 0 {
        return Err(Error::Validation("montage has no tiles".into()));
    }
    let width = ncols * w + (ncols - 1) * GAP;
    let height = rows.len() * h + (rows.len() - 1) * GAP;
    let mut buf = vec![0u8; width * height];
    for (r, row) in rows.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            if tile.pixels.len() != h * w {
                return Err(Error::Shape(format!("tile of {} pixels, expected {}", tile.pixels.len(), h * w)));
            }
            let (y0, x0) = (r * (h + GAP), c * (w + GAP));
            for y in 0..h {
                for x in 0..w {
                    let v = tile.pixels[y * w + x].clamp(0.0, 1.0);
                    buf[(y0 + y) * width + x0 + x] = (v * 255.0).round() as u8;
                }
            }
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Validation(format!("png encoding: {e}"));
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&buf).map_err(png_err)?;
    writer.finish().map_err(png_err)
}
