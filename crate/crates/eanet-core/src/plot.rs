//! Minimal PNG line plots with an embedded 5x7 bitmap font, used for curve
//! emission. No text shaping or font files: labels are uppercased and drawn
//! glyph by glyph, which is plenty for axis ticks and legends.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::Result;

/// One polyline with a legend label. `xs` must be ascending.
#[derive(Debug, Clone)]
pub struct PlotSeries {
    pub label: String,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

/// Title and axis labels for one plot.
#[derive(Debug, Clone)]
pub struct PlotSpec {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
}

const WIDTH: u32 = 640;
const HEIGHT: u32 = 440;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 18.0;
const MARGIN_T: f64 = 34.0;
const MARGIN_B: f64 = 54.0;

pub const PALETTE: [[u8; 3]; 6] = [
    [214, 39, 40],
    [31, 119, 180],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [140, 86, 75],
];

/// Column-row bitmap for one 5x7 glyph; bit 4 is the leftmost column.
fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ',' => [0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        '=' => [0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '@' => [0x0E, 0x11, 0x17, 0x15, 0x17, 0x10, 0x0E],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '%' => [0x19, 0x1A, 0x02, 0x04, 0x08, 0x0B, 0x13],
        '/' => [0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10],
        '+' => [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00],
        ' ' => [0x00; 7],
        // Unknown characters render as a hollow box.
        _ => [0x1F, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1F],
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(color));
    }
}

/// Draw `text` with its top-left corner at (x, y).
fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, color: [u8; 3], scale: i64) {
    let mut cx = x;
    for c in text.chars() {
        let rows = glyph(c);
        for (ry, row) in rows.iter().enumerate() {
            for col in 0..5 {
                if row >> (4 - col) & 1 == 1 {
                    for sy in 0..scale {
                        for sx in 0..scale {
                            put(
                                img,
                                cx + col as i64 * scale + sx,
                                y + ry as i64 * scale + sy,
                                color,
                            );
                        }
                    }
                }
            }
        }
        cx += 6 * scale;
    }
}

fn text_width(text: &str, scale: i64) -> i64 {
    text.chars().count() as i64 * 6 * scale - scale
}

/// 2 px thick Bresenham segment.
fn draw_line(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let (mut x, mut y) = (x0, y0);
    let mut err = dx + dy;
    loop {
        for oy in 0..2 {
            for ox in 0..2 {
                put(img, x + ox, y + oy, color);
            }
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn format_tick(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v:.2}")
    }
}

/// Render `series` as one labeled line plot and write a PNG to `path`.
/// The y axis spans [0, 1] (or the data maximum if larger); the x axis
/// spans [0, max x]. The legend sits inside the top-right corner.
pub fn render_line_plot(spec: &PlotSpec, series: &[PlotSeries], path: &Path) -> Result<()> {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let black = [0, 0, 0];
    let grid = [222, 222, 222];

    let x_max = series
        .iter()
        .flat_map(|s| s.xs.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let y_max = series
        .iter()
        .flat_map(|s| s.ys.iter().copied())
        .fold(1.0f64, f64::max);

    let (px0, px1) = (MARGIN_L, WIDTH as f64 - MARGIN_R);
    let (py0, py1) = (MARGIN_T, HEIGHT as f64 - MARGIN_B);
    let to_px = |x: f64, y: f64| -> (i64, i64) {
        (
            (px0 + x / x_max * (px1 - px0)).round() as i64,
            (py1 - y / y_max * (py1 - py0)).round() as i64,
        )
    };

    // Grid and tick labels.
    for i in 0..=5 {
        let x = x_max * i as f64 / 5.0;
        let (gx, _) = to_px(x, 0.0);
        draw_line(&mut img, gx, py0 as i64, gx, py1 as i64, grid);
        let label = format_tick(x);
        draw_text(
            &mut img,
            gx - text_width(&label, 1) / 2,
            py1 as i64 + 8,
            &label,
            black,
            1,
        );
    }
    for i in 0..=5 {
        let y = y_max * i as f64 / 5.0;
        let (_, gy) = to_px(0.0, y);
        draw_line(&mut img, px0 as i64, gy, px1 as i64, gy, grid);
        let label = format_tick(y);
        draw_text(
            &mut img,
            px0 as i64 - text_width(&label, 1) - 8,
            gy - 3,
            &label,
            black,
            1,
        );
    }

    // Axes frame.
    draw_line(&mut img, px0 as i64, py0 as i64, px1 as i64, py0 as i64, black);
    draw_line(&mut img, px0 as i64, py1 as i64, px1 as i64, py1 as i64, black);
    draw_line(&mut img, px0 as i64, py0 as i64, px0 as i64, py1 as i64, black);
    draw_line(&mut img, px1 as i64, py0 as i64, px1 as i64, py1 as i64, black);

    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        for w in s.xs.windows(2).zip(s.ys.windows(2)) {
            let (a, b) = (to_px(w.0[0], w.1[0]), to_px(w.0[1], w.1[1]));
            draw_line(&mut img, a.0, a.1, b.0, b.1, color);
        }
    }

    // Legend, top-right inside the plot area.
    let legend_w = series
        .iter()
        .map(|s| text_width(&s.label, 1))
        .max()
        .unwrap_or(0)
        + 34;
    let lx = px1 as i64 - legend_w - 6;
    let mut ly = py0 as i64 + 8;
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        for dy in -1..=9 {
            for dx in -2..legend_w {
                put(&mut img, lx + dx, ly + dy, [255, 255, 255]);
            }
        }
        draw_line(&mut img, lx, ly + 3, lx + 22, ly + 3, color);
        draw_text(&mut img, lx + 28, ly, &s.label, black, 1);
        ly += 13;
    }

    draw_text(
        &mut img,
        (WIDTH as i64 - text_width(&spec.title, 2)) / 2,
        9,
        &spec.title,
        black,
        2,
    );
    draw_text(
        &mut img,
        (px0 as i64 + px1 as i64 - text_width(&spec.x_label, 1)) / 2,
        HEIGHT as i64 - 24,
        &spec.x_label,
        black,
        1,
    );
    draw_text(&mut img, 8, py0 as i64 - 14, &spec.y_label, black, 1);

    img.save(path)?;
    Ok(())
}
