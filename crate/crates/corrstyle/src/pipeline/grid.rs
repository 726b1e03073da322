//! Composite grid images with per-cell labels, for figure-style outputs.

use crate::error::{Error, Result};
use crate::imaging::RgbImage;

/// Height in pixels of the label band under each cell.
const LABEL_BAND: usize = 10;
const GLYPH_W: usize = 4;
const GLYPH_H: usize = 6;

/// 3x5 pixel glyphs for the label charset, row-major bitmasks.
fn glyph(c: char) -> [u8; GLYPH_H] {
    // Each entry is a row of 3 bits (MSB = left pixel); 6th row blank.
    match c.to_ascii_uppercase() {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111, 0],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111, 0],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111, 0],
        '3' => [0b111, 0b001, 0b011, 0b001, 0b111, 0],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001, 0],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111, 0],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111, 0],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010, 0],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111, 0],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111, 0],
        'A' => [0b010, 0b101, 0b111, 0b101, 0b101, 0],
        'B' => [0b110, 0b101, 0b110, 0b101, 0b110, 0],
        'C' => [0b011, 0b100, 0b100, 0b100, 0b011, 0],
        'D' => [0b110, 0b101, 0b101, 0b101, 0b110, 0],
        'E' => [0b111, 0b100, 0b110, 0b100, 0b111, 0],
        'F' => [0b111, 0b100, 0b110, 0b100, 0b100, 0],
        'G' => [0b011, 0b100, 0b101, 0b101, 0b011, 0],
        'H' => [0b101, 0b101, 0b111, 0b101, 0b101, 0],
        'I' => [0b111, 0b010, 0b010, 0b010, 0b111, 0],
        'J' => [0b001, 0b001, 0b001, 0b101, 0b010, 0],
        'K' => [0b101, 0b110, 0b100, 0b110, 0b101, 0],
        'L' => [0b100, 0b100, 0b100, 0b100, 0b111, 0],
        'M' => [0b101, 0b111, 0b111, 0b101, 0b101, 0],
        'N' => [0b101, 0b111, 0b111, 0b111, 0b101, 0],
        'O' => [0b010, 0b101, 0b101, 0b101, 0b010, 0],
        'P' => [0b110, 0b101, 0b110, 0b100, 0b100, 0],
        'Q' => [0b010, 0b101, 0b101, 0b110, 0b011, 0],
        'R' => [0b110, 0b101, 0b110, 0b101, 0b101, 0],
        'S' => [0b011, 0b100, 0b010, 0b001, 0b110, 0],
        'T' => [0b111, 0b010, 0b010, 0b010, 0b010, 0],
        'U' => [0b101, 0b101, 0b101, 0b101, 0b111, 0],
        'V' => [0b101, 0b101, 0b101, 0b101, 0b010, 0],
        'W' => [0b101, 0b101, 0b111, 0b111, 0b101, 0],
        'X' => [0b101, 0b101, 0b010, 0b101, 0b101, 0],
        'Y' => [0b101, 0b101, 0b010, 0b010, 0b010, 0],
        'Z' => [0b111, 0b001, 0b010, 0b100, 0b111, 0],
        '.' => [0, 0, 0, 0, 0b010, 0],
        '-' => [0, 0, 0b111, 0, 0, 0],
        '_' => [0, 0, 0, 0, 0b111, 0],
        '=' => [0, 0b111, 0, 0b111, 0, 0],
        ':' => [0, 0b010, 0, 0b010, 0, 0],
        '/' => [0b001, 0b001, 0b010, 0b100, 0b100, 0],
        _ => [0, 0, 0, 0, 0, 0], // space and anything unmapped
    }
}

fn draw_label(canvas: &mut RgbImage, text: &str, top: usize, left: usize, max_width: usize) {
    let mut x = left + 1;
    for c in text.chars() {
        if x + GLYPH_W > left + max_width {
            break;
        }
        let rows = glyph(c);
        for (gy, row) in rows.iter().enumerate() {
            for gx in 0..3 {
                if row & (1 << (2 - gx)) != 0 {
                    let (py, px) = (top + 2 + gy, x + gx);
                    if py < canvas.height() && px < canvas.width() {
                        for ch in 0..3 {
                            canvas.data_mut()[[ch, py, px]] = 1.0;
                        }
                    }
                }
            }
        }
        x += GLYPH_W;
    }
}

/// Letterbox `img` into a `cell x cell` square preserving aspect ratio.
fn letterbox(img: &RgbImage, cell: usize) -> RgbImage {
    let (h, w) = (img.height(), img.width());
    let scale = (cell as f64 / h as f64).min(cell as f64 / w as f64);
    let (nh, nw) = (
        ((h as f64 * scale).round() as usize).max(1),
        ((w as f64 * scale).round() as usize).max(1),
    );
    let resized = img.resize_bilinear(nh, nw);
    let mut out = RgbImage::zeros(cell, cell);
    let (oy, ox) = ((cell - nh) / 2, (cell - nw) / 2);
    for c in 0..3 {
        for y in 0..nh {
            for x in 0..nw {
                out.data_mut()[[c, oy + y, ox + x]] = resized.data()[[c, y, x]];
            }
        }
    }
    out
}

/// Compose labeled images into a row-major grid. Each cell is
/// `cell_size x cell_size` plus a label band; sources are letterboxed, never
/// mutated.
pub fn emit_grid(
    images: &[RgbImage],
    labels: &[String],
    columns: usize,
    cell_size: usize,
) -> Result<RgbImage> {
    if images.is_empty() {
        return Err(Error::EmptyInput("emit_grid: no images".into()));
    }
    if labels.len() != images.len() {
        return Err(Error::shape(
            "emit_grid: labels",
            format!("{}", images.len()),
            format!("{}", labels.len()),
        ));
    }
    if columns == 0 || cell_size == 0 {
        return Err(Error::Config("emit_grid: columns and cell_size must be > 0".into()));
    }
    let cols = columns.min(images.len());
    let rows = images.len().div_ceil(cols);
    let cell_h = cell_size + LABEL_BAND;
    let mut canvas = RgbImage::zeros(rows * cell_h, cols * cell_size);
    for (i, (img, label)) in images.iter().zip(labels).enumerate() {
        let (row, col) = (i / cols, i % cols);
        let (top, left) = (row * cell_h, col * cell_size);
        let boxed = letterbox(img, cell_size);
        for c in 0..3 {
            for y in 0..cell_size {
                for x in 0..cell_size {
                    canvas.data_mut()[[c, top + y, left + x]] = boxed.data()[[c, y, x]];
                }
            }
        }
        draw_label(&mut canvas, label, top + cell_size, left, cell_size);
    }
    Ok(canvas)
}
