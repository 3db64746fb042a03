//! Minimal PNG line plots with no font or GUI dependencies.
//!
//! Renders axes, gridlines, tick labels, polyline series with markers, and
//! a legend onto an RGB raster using a built-in 5x7 glyph set. Output is
//! deterministic for identical inputs.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

/// One named polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Canvas text and geometry settings.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotSpec {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub width: u32,
    pub height: u32,
}

impl PlotSpec {
    pub fn new(title: impl Into<String>, x_label: impl Into<String>, y_label: impl Into<String>) -> Self {
        PlotSpec {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            width: 640,
            height: 480,
        }
    }
}

const MARGIN_LEFT: u32 = 64;
const MARGIN_RIGHT: u32 = 24;
const MARGIN_TOP: u32 = 36;
const MARGIN_BOTTOM: u32 = 52;

const PALETTE: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([214, 39, 40]),
    Rgb([44, 160, 44]),
    Rgb([255, 127, 14]),
    Rgb([148, 103, 189]),
    Rgb([23, 139, 139]),
];

/// Renders `series` as a line plot and writes it as a PNG.
pub fn line_plot(path: &Path, spec: &PlotSpec, series: &[Series]) -> Result<()> {
    if series.is_empty() || series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::InvalidInput("line_plot needs at least one data point".into()));
    }
    for s in series {
        for &(x, y) in &s.points {
            if !x.is_finite() || !y.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "series '{}' contains a non-finite point",
                    s.name
                )));
            }
        }
    }
    if spec.width < 200 || spec.height < 150 {
        return Err(Error::InvalidInput("plot canvas too small".into()));
    }

    let mut img = RgbImage::from_pixel(spec.width, spec.height, Rgb([255, 255, 255]));
    let (x_min, x_max) = padded_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y_min, y_max) = padded_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));

    let plot_left = MARGIN_LEFT;
    let plot_right = spec.width - MARGIN_RIGHT;
    let plot_top = MARGIN_TOP;
    let plot_bottom = spec.height - MARGIN_BOTTOM;

    let to_px = |x: f64, y: f64| -> (i64, i64) {
        let fx = (x - x_min) / (x_max - x_min);
        let fy = (y - y_min) / (y_max - y_min);
        let px = plot_left as f64 + fx * (plot_right - plot_left) as f64;
        let py = plot_bottom as f64 - fy * (plot_bottom - plot_top) as f64;
        (px.round() as i64, py.round() as i64)
    };

    // Gridlines and tick labels.
    let grid = Rgb([225, 225, 225]);
    let axis = Rgb([40, 40, 40]);
    for (i, tick) in ticks(y_min, y_max, 5).iter().enumerate() {
        let (_, py) = to_px(x_min, *tick);
        if i > 0 {
            draw_hline(&mut img, plot_left, plot_right, py, grid);
        }
        let label = fmt_tick(*tick);
        let w = text_width(&label, 1);
        draw_text(
            &mut img,
            plot_left as i64 - w as i64 - 6,
            py - 3,
            &label,
            1,
            axis,
        );
    }
    let x_tick_values = x_ticks_for(series, x_min, x_max);
    for tick in &x_tick_values {
        let (px, _) = to_px(*tick, y_min);
        draw_vline(&mut img, px, plot_top, plot_bottom, grid);
        let label = fmt_tick(*tick);
        let w = text_width(&label, 1);
        draw_text(&mut img, px - w as i64 / 2, plot_bottom as i64 + 6, &label, 1, axis);
    }

    // Axes drawn over the grid.
    draw_hline(&mut img, plot_left, plot_right, plot_bottom as i64, axis);
    draw_vline(&mut img, plot_left as i64, plot_top, plot_bottom, axis);

    // Series polylines with square markers.
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let mut pts: Vec<(i64, i64)> = s.points.iter().map(|&(x, y)| to_px(x, y)).collect();
        pts.sort_by_key(|&(px, _)| px);
        for pair in pts.windows(2) {
            draw_segment(&mut img, pair[0], pair[1], color);
        }
        for &(px, py) in &pts {
            fill_rect(&mut img, px - 2, py - 2, 5, 5, color);
        }
    }

    // Title centered, labels, legend.
    let title_w = text_width(&spec.title, 2);
    draw_text(
        &mut img,
        (spec.width as i64 - title_w as i64) / 2,
        8,
        &spec.title,
        2,
        axis,
    );
    let xl_w = text_width(&spec.x_label, 1);
    draw_text(
        &mut img,
        (spec.width as i64 - xl_w as i64) / 2,
        spec.height as i64 - 14,
        &spec.x_label,
        1,
        axis,
    );
    // Y label rendered horizontally above the axis.
    draw_text(&mut img, 4, plot_top as i64 - 12, &spec.y_label, 1, axis);

    let mut legend_y = plot_top as i64 + 6;
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let name_w = text_width(&s.name, 1);
        let x0 = plot_right as i64 - name_w as i64 - 18;
        fill_rect(&mut img, x0, legend_y, 10, 7, color);
        draw_text(&mut img, x0 + 14, legend_y, &s.name, 1, axis);
        legend_y += 12;
    }

    img.save(path)
        .map_err(|e| Error::Decode(format!("write plot {}: {e}", path.display())))
}

/// Data range widened by 5% on each side; degenerate ranges get a unit pad.
fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        return (0.0, 1.0);
    }
    if lo == hi {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

/// Round tick positions spanning the range.
fn ticks(lo: f64, hi: f64, want: usize) -> Vec<f64> {
    let span = hi - lo;
    let raw_step = span / want as f64;
    let mag = 10f64.powf(raw_step.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|&s| s >= raw_step)
        .unwrap_or(mag * 10.0);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        // Snap near-zero ticks so labels read 0 rather than 1e-17.
        out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    out
}

/// Uses the distinct data x-values as ticks when few, round ticks otherwise.
fn x_ticks_for(series: &[Series], lo: f64, hi: f64) -> Vec<f64> {
    let mut xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() <= 8 {
        xs
    } else {
        ticks(lo, hi, 6)
    }
}

fn fmt_tick(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e9 {
        format!("{}", v as i64)
    } else if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        let s = format!("{v:.2}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn draw_hline(img: &mut RgbImage, x0: u32, x1: u32, y: i64, color: Rgb<u8>) {
    for x in x0..=x1 {
        put(img, x as i64, y, color);
    }
}

fn draw_vline(img: &mut RgbImage, x: i64, y0: u32, y1: u32, color: Rgb<u8>) {
    for y in y0..=y1 {
        put(img, x, y as i64, color);
    }
}

fn fill_rect(img: &mut RgbImage, x: i64, y: i64, w: i64, h: i64, color: Rgb<u8>) {
    for dy in 0..h {
        for dx in 0..w {
            put(img, x + dx, y + dy, color);
        }
    }
}

/// Bresenham segment.
fn draw_segment(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), color: Rgb<u8>) {
    let (mut x0, mut y0) = a;
    let (x1, y1) = b;
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(img, x0, y0, color);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// 5x7 glyphs, one u8 per row, low 5 bits used (MSB on the left).
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
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ',' => [0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '/' => [0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10],
        '%' => [0x19, 0x19, 0x02, 0x04, 0x08, 0x13, 0x13],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '=' => [0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00],
        ' ' => [0x00; 7],
        _ => [0x1F, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1F],
    }
}

/// Pixel width of rendered text (6 columns per glyph, last gap dropped).
fn text_width(text: &str, scale: u32) -> u32 {
    let n = text.chars().count() as u32;
    if n == 0 {
        0
    } else {
        (n * 6 - 1) * scale
    }
}

fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, scale: u32, color: Rgb<u8>) {
    let mut cx = x;
    for c in text.chars() {
        let rows = glyph(c);
        for (ry, row) in rows.iter().enumerate() {
            for bit in 0..5 {
                if row & (0x10 >> bit) != 0 {
                    fill_rect(
                        img,
                        cx + (bit as i64) * scale as i64,
                        y + (ry as i64) * scale as i64,
                        scale as i64,
                        scale as i64,
                        color,
                    );
                }
            }
        }
        cx += 6 * scale as i64;
    }
}
