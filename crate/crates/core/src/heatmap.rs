//! PNG heatmaps of confusion matrices.
//!
//! Rows are predicted labels and columns true labels, as in the CSV export.
//! Each row is normalised by its sum; the colour runs from white (0) to dark
//! blue (1).

use std::path::Path;

use crate::error::{Error, Result};
use crate::evaluation::CountMatrix;

/// Pixel side of one matrix cell.
pub const CELL: usize = 24;

const LOW: [f64; 3] = [255.0, 255.0, 255.0];
const HIGH: [f64; 3] = [8.0, 48.0, 107.0];

pub fn colour(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let mut out = [0u8; 3];
    for i in 0..3 {
        out[i] = (LOW[i] + (HIGH[i] - LOW[i]) * v).round() as u8;
    }
    out
}

/// Row-normalised intensities; empty rows are all zero.
pub fn row_normalised(cm: &CountMatrix) -> Vec<Vec<f64>> {
    cm.rows()
        .into_iter()
        .map(|row| {
            let s: u64 = row.iter().sum();
            row.iter()
                .map(|&c| if s == 0 { 0.0 } else { c as f64 / s as f64 })
                .collect()
        })
        .collect()
}

/// RGB pixels of the heatmap, `(side, side, bytes)`.
pub fn render(cm: &CountMatrix) -> (usize, Vec<u8>) {
    let n = cm.size();
    let side = n * CELL;
    let vals = row_normalised(cm);
    let mut px = vec![0u8; side * side * 3];
    for y in 0..side {
        for x in 0..side {
            let (r, c) = (y / CELL, x / CELL);
            // one-pixel grid lines between cells
            let rgb = if y % CELL == 0 || x % CELL == 0 {
                [200, 200, 200]
            } else {
                colour(vals[r][c])
            };
            px[(y * side + x) * 3..][..3].copy_from_slice(&rgb);
        }
    }
    (side, px)
}

/// Writes the heatmap; `text` pairs become PNG `tEXt` chunks.
pub fn write_png(path: &Path, cm: &CountMatrix, text: &[(&str, &str)]) -> Result<()> {
    let (side, px) = render(cm);
    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), side as u32, side as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::data(format!("writing {}: {e}", path.display()));
    for (k, v) in text {
        enc.add_text_chunk(k.to_string(), v.to_string()).map_err(png_err)?;
    }
    let mut w = enc.write_header().map_err(png_err)?;
    w.write_image_data(&px).map_err(png_err)?;
    w.finish().map_err(png_err)?;
    Ok(())
}
