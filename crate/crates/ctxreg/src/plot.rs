//! Heatmap rendering for the analysis tools.
//!
//! Pure-pixel PNG output: a fixed color ramp, a small built-in 5x7
//! bitmap font for token labels, and deterministic bytes for identical
//! inputs (reruns overwrite with the same file content).

use image::{Rgb, RgbImage};
use ndarray::Array2;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("failed to write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

/// Five-stop color ramp (dark violet to yellow), linearly interpolated.
fn colormap(x: f64) -> Rgb<u8> {
    const STOPS: [(f64, [u8; 3]); 5] = [
        (0.00, [68, 1, 84]),
        (0.25, [59, 82, 139]),
        (0.50, [33, 145, 140]),
        (0.75, [94, 201, 98]),
        (1.00, [253, 231, 37]),
    ];
    let x = x.clamp(0.0, 1.0);
    for w in STOPS.windows(2) {
        let (x0, c0) = w[0];
        let (x1, c1) = w[1];
        if x <= x1 {
            let t = if x1 > x0 { (x - x0) / (x1 - x0) } else { 0.0 };
            let mix = |a: u8, b: u8| (a as f64 + t * (b as f64 - a as f64)).round() as u8;
            return Rgb([mix(c0[0], c1[0]), mix(c0[1], c1[1]), mix(c0[2], c1[2])]);
        }
    }
    Rgb(STOPS[4].1)
}

// 5x7 glyphs as 7 rows of 5 cells; lowercase, digits and the few
// symbols token labels need. Unknown characters render blank.
#[rustfmt::skip]
const GLYPHS: &[(char, [&str; 7])] = &[
    ('a', ["00000","00000","01110","00001","01111","10001","01111"]),
    ('b', ["10000","10000","10110","11001","10001","10001","11110"]),
    ('c', ["00000","00000","01110","10000","10000","10001","01110"]),
    ('d', ["00001","00001","01101","10011","10001","10001","01111"]),
    ('e', ["00000","00000","01110","10001","11111","10000","01110"]),
    ('f', ["00110","01001","01000","11100","01000","01000","01000"]),
    ('g', ["00000","01111","10001","10001","01111","00001","01110"]),
    ('h', ["10000","10000","10110","11001","10001","10001","10001"]),
    ('i', ["00100","00000","01100","00100","00100","00100","01110"]),
    ('j', ["00010","00000","00110","00010","00010","10010","01100"]),
    ('k', ["10000","10000","10010","10100","11000","10100","10010"]),
    ('l', ["01100","00100","00100","00100","00100","00100","01110"]),
    ('m', ["00000","00000","11010","10101","10101","10101","10101"]),
    ('n', ["00000","00000","10110","11001","10001","10001","10001"]),
    ('o', ["00000","00000","01110","10001","10001","10001","01110"]),
    ('p', ["00000","00000","11110","10001","11110","10000","10000"]),
    ('q', ["00000","00000","01111","10001","01111","00001","00001"]),
    ('r', ["00000","00000","10110","11001","10000","10000","10000"]),
    ('s', ["00000","00000","01111","10000","01110","00001","11110"]),
    ('t', ["01000","01000","11100","01000","01000","01001","00110"]),
    ('u', ["00000","00000","10001","10001","10001","10011","01101"]),
    ('v', ["00000","00000","10001","10001","10001","01010","00100"]),
    ('w', ["00000","00000","10001","10001","10101","10101","01010"]),
    ('x', ["00000","00000","10001","01010","00100","01010","10001"]),
    ('y', ["00000","00000","10001","10001","01111","00001","01110"]),
    ('z', ["00000","00000","11111","00010","00100","01000","11111"]),
    ('0', ["01110","10001","10011","10101","11001","10001","01110"]),
    ('1', ["00100","01100","00100","00100","00100","00100","01110"]),
    ('2', ["01110","10001","00001","00110","01000","10000","11111"]),
    ('3', ["11111","00010","00100","00010","00001","10001","01110"]),
    ('4', ["00010","00110","01010","10010","11111","00010","00010"]),
    ('5', ["11111","10000","11110","00001","00001","10001","01110"]),
    ('6', ["00110","01000","10000","11110","10001","10001","01110"]),
    ('7', ["11111","00001","00010","00100","01000","01000","01000"]),
    ('8', ["01110","10001","10001","01110","10001","10001","01110"]),
    ('9', ["01110","10001","10001","01111","00001","00010","01100"]),
    ('<', ["00010","00100","01000","10000","01000","00100","00010"]),
    ('>', ["01000","00100","00010","00001","00010","00100","01000"]),
    ('*', ["00000","00100","10101","01110","10101","00100","00000"]),
    ('#', ["01010","01010","11111","01010","11111","01010","01010"]),
    ('-', ["00000","00000","00000","01110","00000","00000","00000"]),
    ('_', ["00000","00000","00000","00000","00000","00000","11111"]),
    ('.', ["00000","00000","00000","00000","00000","01100","01100"]),
];

const GLYPH_W: u32 = 6; // 5 px + 1 spacing
const GLYPH_H: u32 = 8;

fn glyph(c: char) -> Option<&'static [&'static str; 7]> {
    let c = c.to_ascii_lowercase();
    GLYPHS.iter().find(|(g, _)| *g == c).map(|(_, rows)| rows)
}

fn draw_text(img: &mut RgbImage, x: u32, y: u32, text: &str, color: Rgb<u8>) {
    let mut cx = x;
    for c in text.chars() {
        if let Some(rows) = glyph(c) {
            for (ry, row) in rows.iter().enumerate() {
                for (rx, bit) in row.chars().enumerate() {
                    if bit == '1' {
                        let px = cx + rx as u32;
                        let py = y + ry as u32;
                        if px < img.width() && py < img.height() {
                            img.put_pixel(px, py, color);
                        }
                    }
                }
            }
        }
        cx += GLYPH_W;
    }
}

/// Draws text with characters stacked vertically (for column labels).
fn draw_text_vertical(img: &mut RgbImage, x: u32, y: u32, text: &str, color: Rgb<u8>) {
    let mut cy = y;
    for c in text.chars() {
        if let Some(rows) = glyph(c) {
            for (ry, row) in rows.iter().enumerate() {
                for (rx, bit) in row.chars().enumerate() {
                    if bit == '1' {
                        let px = x + rx as u32;
                        let py = cy + ry as u32;
                        if px < img.width() && py < img.height() {
                            img.put_pixel(px, py, color);
                        }
                    }
                }
            }
        }
        cy += GLYPH_H;
    }
}

fn normalize(values: &Array2<f64>) -> Array2<f64> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if (max - min).abs() < 1e-15 {
        return Array2::from_elem(values.raw_dim(), 0.5);
    }
    values.mapv(|v| (v - min) / (max - min))
}

fn paint_cells(img: &mut RgbImage, x0: u32, y0: u32, values: &Array2<f64>, cell: u32) {
    let normed = normalize(values);
    for (r, row) in normed.rows().into_iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let color = colormap(v);
            for dy in 0..cell {
                for dx in 0..cell {
                    img.put_pixel(x0 + c as u32 * cell + dx, y0 + r as u32 * cell + dy, color);
                }
            }
        }
    }
}

const BG: Rgb<u8> = Rgb([250, 250, 250]);
const FG: Rgb<u8> = Rgb([20, 20, 20]);

/// Labeled matrix heatmap (row labels left, column labels on top).
pub fn save_matrix_heatmap(
    values: &Array2<f64>,
    row_labels: &[String],
    col_labels: &[String],
    path: &Path,
) -> Result<(), PlotError> {
    let cell: u32 = 22;
    let left = row_labels.iter().map(|l| l.len()).max().unwrap_or(0) as u32 * GLYPH_W + 8;
    let top = col_labels.iter().map(|l| l.len()).max().unwrap_or(0) as u32 * GLYPH_H + 8;
    let width = left + values.ncols() as u32 * cell + 8;
    let height = top + values.nrows() as u32 * cell + 8;
    let mut img = RgbImage::from_pixel(width, height, BG);

    paint_cells(&mut img, left, top, values, cell);
    for (i, label) in row_labels.iter().enumerate() {
        let y = top + i as u32 * cell + (cell - GLYPH_H) / 2;
        draw_text(&mut img, 4, y, label, FG);
    }
    for (j, label) in col_labels.iter().enumerate() {
        let x = left + j as u32 * cell + (cell.saturating_sub(GLYPH_W)) / 2;
        draw_text_vertical(&mut img, x, 4, label, FG);
    }
    img.save(path).map_err(|source| PlotError::Io { path: path.display().to_string(), source })
}

/// One labeled panel per token map, laid out in rows.
pub fn save_map_panels(
    maps: &[Array2<f64>],
    labels: &[String],
    path: &Path,
) -> Result<(), PlotError> {
    assert_eq!(maps.len(), labels.len());
    let cell: u32 = 10;
    let per_row = 6usize.min(maps.len().max(1));
    let rows = maps.len().div_ceil(per_row);
    let map_h = maps.first().map(|m| m.nrows()).unwrap_or(1) as u32;
    let map_w = maps.first().map(|m| m.ncols()).unwrap_or(1) as u32;
    let panel_w = map_w * cell + 8;
    let panel_h = map_h * cell + GLYPH_H + 10;
    let width = per_row as u32 * panel_w + 8;
    let height = rows as u32 * panel_h + 8;
    let mut img = RgbImage::from_pixel(width, height, BG);

    for (i, (map, label)) in maps.iter().zip(labels).enumerate() {
        let px = 8 + (i % per_row) as u32 * panel_w;
        let py = 8 + (i / per_row) as u32 * panel_h;
        paint_cells(&mut img, px, py, map, cell);
        draw_text(&mut img, px, py + map_h * cell + 2, label, FG);
    }
    img.save(path).map_err(|source| PlotError::Io { path: path.display().to_string(), source })
}
