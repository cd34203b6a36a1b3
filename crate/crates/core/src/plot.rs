//! Deterministic chart rendering with no system dependencies: training
//! curves, actual-vs-predicted scatter, and age histograms drawn onto RGB
//! rasters with an embedded 5×7 bitmap font and written as PNG.

use std::path::Path;

use image::{Rgb, RgbImage};
use thiserror::Error;

use crate::trainer::EpochRecord;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("no data to plot: {0}")]
    EmptyData(&'static str),
    #[error("image encode failed: {0}")]
    Encode(#[from] image::ImageError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const FG: Rgb<u8> = Rgb([20, 20, 20]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const BLUE: Rgb<u8> = Rgb([31, 119, 180]);
const ORANGE: Rgb<u8> = Rgb([255, 127, 14]);
const RED: Rgb<u8> = Rgb([214, 39, 40]);
const BAR: Rgb<u8> = Rgb([114, 158, 206]);

// ---- 5×7 bitmap font (uppercase-only; lowercase input is upmapped) ----

fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
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
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
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
        'Y' => [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
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
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ',' => [0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '%' => [0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03],
        '/' => [0x00, 0x01, 0x02, 0x04, 0x08, 0x10, 0x00],
        '=' => [0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00],
        _ => [0; 7],
    }
}

fn draw_text(img: &mut RgbImage, x: i32, y: i32, scale: u32, color: Rgb<u8>, text: &str) {
    let mut cx = x;
    for ch in text.chars() {
        let g = glyph(ch);
        for (ry, row) in g.iter().enumerate() {
            for rx in 0..5 {
                if row & (0x10 >> rx) != 0 {
                    for sy in 0..scale {
                        for sx in 0..scale {
                            put(img, cx + (rx as i32) * scale as i32 + sx as i32, y + ry as i32 * scale as i32 + sy as i32, color);
                        }
                    }
                }
            }
        }
        cx += 6 * scale as i32;
    }
}

fn text_width(text: &str, scale: u32) -> i32 {
    text.chars().count() as i32 * 6 * scale as i32 - scale as i32
}

fn put(img: &mut RgbImage, x: i32, y: i32, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn draw_line(img: &mut RgbImage, x0: i32, y0: i32, x1: i32, y1: i32, color: Rgb<u8>) {
    let (mut x, mut y) = (x0, y0);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(img, x, y, color);
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

fn fill_rect(img: &mut RgbImage, x0: i32, y0: i32, x1: i32, y1: i32, color: Rgb<u8>) {
    for y in y0.min(y1)..=y0.max(y1) {
        for x in x0.min(x1)..=x0.max(x1) {
            put(img, x, y, color);
        }
    }
}

fn fill_dot(img: &mut RgbImage, x: i32, y: i32, r: i32, color: Rgb<u8>) {
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                put(img, x + dx, y + dy, color);
            }
        }
    }
}

/// 1-2-5 tick spacing aimed at roughly `target` ticks.
fn tick_step(range: f64, target: usize) -> f64 {
    let raw = range / target.max(1) as f64;
    let mag = 10f64.powf(raw.abs().max(f64::MIN_POSITIVE).log10().floor());
    let norm = raw / mag;
    let mult = if norm < 1.5 {
        1.0
    } else if norm < 3.5 {
        2.0
    } else if norm < 7.5 {
        5.0
    } else {
        10.0
    };
    mult * mag
}

fn format_tick(v: f64, step: f64) -> String {
    let decimals = if step >= 1.0 {
        0
    } else {
        (-step.log10().floor() as i32).clamp(0, 4) as usize
    };
    format!("{v:.decimals$}")
}

/// Pixel rectangle of the data area.
#[derive(Clone, Copy)]
struct Rect {
    x0: i32,
    y0: i32,
    x1: i32,
    y1: i32,
}

struct Panel {
    rect: Rect,
    xlo: f64,
    xhi: f64,
    ylo: f64,
    yhi: f64,
}

impl Panel {
    fn sx(&self, x: f64) -> i32 {
        let t = (x - self.xlo) / (self.xhi - self.xlo);
        self.rect.x0 + (t * (self.rect.x1 - self.rect.x0) as f64).round() as i32
    }

    fn sy(&self, y: f64) -> i32 {
        let t = (y - self.ylo) / (self.yhi - self.ylo);
        self.rect.y1 - (t * (self.rect.y1 - self.rect.y0) as f64).round() as i32
    }

    fn draw_frame(&self, img: &mut RgbImage, title: &str, xlabel: &str, ylabel: &str) {
        let r = self.rect;
        // Grid + ticks.
        let xstep = tick_step(self.xhi - self.xlo, 6);
        let mut t = (self.xlo / xstep).ceil() * xstep;
        while t <= self.xhi + 1e-9 {
            let x = self.sx(t);
            draw_line(img, x, r.y0, x, r.y1, GRID);
            let label = format_tick(t, xstep);
            draw_text(img, x - text_width(&label, 1) / 2, r.y1 + 6, 1, FG, &label);
            t += xstep;
        }
        let ystep = tick_step(self.yhi - self.ylo, 5);
        let mut t = (self.ylo / ystep).ceil() * ystep;
        while t <= self.yhi + 1e-9 {
            let y = self.sy(t);
            draw_line(img, r.x0, y, r.x1, y, GRID);
            let label = format_tick(t, ystep);
            draw_text(img, r.x0 - text_width(&label, 1) - 6, y - 3, 1, FG, &label);
            t += ystep;
        }
        // Axes.
        draw_line(img, r.x0, r.y0, r.x0, r.y1, FG);
        draw_line(img, r.x0, r.y1, r.x1, r.y1, FG);
        // Labels.
        draw_text(img, r.x0 + ((r.x1 - r.x0) - text_width(title, 2)) / 2, r.y0 - 24, 2, FG, title);
        draw_text(
            img,
            r.x0 + ((r.x1 - r.x0) - text_width(xlabel, 1)) / 2,
            r.y1 + 20,
            1,
            FG,
            xlabel,
        );
        draw_text(img, r.x0, r.y0 - 10, 1, FG, ylabel);
    }

    fn draw_polyline(&self, img: &mut RgbImage, pts: &[(f64, f64)], color: Rgb<u8>) {
        for pair in pts.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            draw_line(img, self.sx(a.0), self.sy(a.1), self.sx(b.0), self.sy(b.1), color);
        }
        if pts.len() == 1 {
            fill_dot(img, self.sx(pts[0].0), self.sy(pts[0].1), 2, color);
        }
    }
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
    let range = (hi - lo).max(1e-9);
    (lo - 0.05 * range, hi + 0.05 * range)
}

fn value_range<'a>(series: impl Iterator<Item = &'a (f64, f64)>) -> ((f64, f64), (f64, f64)) {
    let mut xlo = f64::INFINITY;
    let mut xhi = f64::NEG_INFINITY;
    let mut ylo = f64::INFINITY;
    let mut yhi = f64::NEG_INFINITY;
    for &(x, y) in series {
        xlo = xlo.min(x);
        xhi = xhi.max(x);
        ylo = ylo.min(y);
        yhi = yhi.max(y);
    }
    (padded(xlo, xhi), padded(ylo, yhi))
}

fn legend(img: &mut RgbImage, rect: Rect, entries: &[(&str, Rgb<u8>)]) {
    let mut y = rect.y0 + 8;
    for (label, color) in entries {
        let x1 = rect.x1 - 10;
        let x0 = x1 - text_width(label, 1) - 26;
        draw_line(img, x0, y + 3, x0 + 18, y + 3, *color);
        draw_line(img, x0, y + 4, x0 + 18, y + 4, *color);
        draw_text(img, x0 + 24, y, 1, FG, label);
        y += 14;
    }
}

fn render_line_panel(
    img: &mut RgbImage,
    rect: Rect,
    title: &str,
    xlabel: &str,
    ylabel: &str,
    series: &[(&str, Vec<(f64, f64)>, Rgb<u8>)],
) {
    let ((xlo, xhi), (ylo, yhi)) = value_range(series.iter().flat_map(|(_, pts, _)| pts.iter()));
    let panel = Panel { rect, xlo, xhi, ylo, yhi };
    panel.draw_frame(img, title, xlabel, ylabel);
    for (_, pts, color) in series {
        panel.draw_polyline(img, pts, *color);
    }
    legend(img, rect, &series.iter().map(|(n, _, c)| (*n, *c)).collect::<Vec<_>>());
}

/// Loss and MAE curves (train and validation) over epochs, two stacked
/// panels in one image.
pub fn training_curves(path: &Path, history: &[EpochRecord]) -> Result<(), PlotError> {
    if history.is_empty() {
        return Err(PlotError::EmptyData("history"));
    }
    let mut img = RgbImage::from_pixel(860, 760, BG);
    let xs = |f: fn(&EpochRecord) -> f64| -> Vec<(f64, f64)> {
        history.iter().map(|r| (r.epoch as f64, f(r))).collect()
    };
    render_line_panel(
        &mut img,
        Rect { x0: 90, y0: 50, x1: 830, y1: 340 },
        "LOSS",
        "EPOCH",
        "MSE",
        &[
            ("TRAIN", xs(|r| r.train_loss), BLUE),
            ("VAL", xs(|r| r.val_loss), ORANGE),
        ],
    );
    render_line_panel(
        &mut img,
        Rect { x0: 90, y0: 430, x1: 830, y1: 710 },
        "MAE",
        "EPOCH",
        "YEARS",
        &[
            ("TRAIN", xs(|r| r.train_mae), BLUE),
            ("VAL", xs(|r| r.val_mae), ORANGE),
        ],
    );
    img.save(path)?;
    Ok(())
}

/// Actual-vs-predicted scatter with the identity line, square axes.
pub fn prediction_scatter(path: &Path, pairs: &[(f64, f64)]) -> Result<(), PlotError> {
    if pairs.is_empty() {
        return Err(PlotError::EmptyData("predictions"));
    }
    let mut img = RgbImage::from_pixel(640, 640, BG);
    let lo = pairs.iter().map(|&(a, p)| a.min(p)).fold(f64::INFINITY, f64::min);
    let hi = pairs.iter().map(|&(a, p)| a.max(p)).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = padded(lo, hi);
    let rect = Rect { x0: 90, y0: 50, x1: 610, y1: 570 };
    let panel = Panel { rect, xlo: lo, xhi: hi, ylo: lo, yhi: hi };
    panel.draw_frame(&mut img, "ACTUAL VS PREDICTED", "ACTUAL AGE (YEARS)", "PREDICTED");
    draw_line(&mut img, panel.sx(lo), panel.sy(lo), panel.sx(hi), panel.sy(hi), RED);
    for &(a, p) in pairs {
        fill_dot(&mut img, panel.sx(a), panel.sy(p), 2, BLUE);
    }
    legend(&mut img, rect, &[("IDENTITY", RED), ("SAMPLE", BLUE)]);
    img.save(path)?;
    Ok(())
}

/// Decade histogram of ages ([0,10), [10,20), …), bars labeled by decade.
pub fn age_histogram(path: &Path, ages: &[f64]) -> Result<(), PlotError> {
    if ages.is_empty() {
        return Err(PlotError::EmptyData("ages"));
    }
    let lo_decade = (ages.iter().fold(f64::INFINITY, |a, &b| a.min(b)) / 10.0).floor() as i64;
    let hi_decade = (ages.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) / 10.0).floor() as i64;
    let nbins = (hi_decade - lo_decade + 1) as usize;
    let mut counts = vec![0usize; nbins];
    for &a in ages {
        counts[((a / 10.0).floor() as i64 - lo_decade) as usize] += 1;
    }
    let max_count = *counts.iter().max().unwrap();

    let mut img = RgbImage::from_pixel(760, 520, BG);
    let rect = Rect { x0: 90, y0: 50, x1: 730, y1: 450 };
    let panel = Panel {
        rect,
        xlo: 0.0,
        xhi: nbins as f64,
        ylo: 0.0,
        yhi: (max_count as f64 * 1.08).max(1.0),
    };
    // Frame without x grid (categorical axis).
    let ystep = tick_step(panel.yhi, 5);
    let mut t = 0.0;
    while t <= panel.yhi + 1e-9 {
        let y = panel.sy(t);
        draw_line(&mut img, rect.x0, y, rect.x1, y, GRID);
        let label = format_tick(t, ystep);
        draw_text(&mut img, rect.x0 - text_width(&label, 1) - 6, y - 3, 1, FG, &label);
        t += ystep;
    }
    draw_line(&mut img, rect.x0, rect.y0, rect.x0, rect.y1, FG);
    draw_line(&mut img, rect.x0, rect.y1, rect.x1, rect.y1, FG);
    draw_text(
        &mut img,
        rect.x0 + ((rect.x1 - rect.x0) - text_width("AGE DISTRIBUTION", 2)) / 2,
        rect.y0 - 24,
        2,
        FG,
        "AGE DISTRIBUTION",
    );
    draw_text(
        &mut img,
        rect.x0 + ((rect.x1 - rect.x0) - text_width("AGE RANGE (YEARS)", 1)) / 2,
        rect.y1 + 22,
        1,
        FG,
        "AGE RANGE (YEARS)",
    );
    draw_text(&mut img, rect.x0, rect.y0 - 10, 1, FG, "COUNT");

    for (i, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let x0 = panel.sx(i as f64 + 0.12);
        let x1 = panel.sx(i as f64 + 0.88);
        let y1 = panel.sy(0.0);
        let y0 = panel.sy(c as f64);
        fill_rect(&mut img, x0, y0, x1, y1 - 1, BAR);
        draw_line(&mut img, x0, y0, x1, y0, FG);
        draw_line(&mut img, x0, y0, x0, y1 - 1, FG);
        draw_line(&mut img, x1, y0, x1, y1 - 1, FG);
        let label = format!("{}", c);
        draw_text(&mut img, (x0 + x1) / 2 - text_width(&label, 1) / 2, y0 - 10, 1, FG, &label);
    }
    for (i, d) in (lo_decade..=hi_decade).enumerate() {
        let label = format!("{}-{}", d * 10, d * 10 + 9);
        let cx = panel.sx(i as f64 + 0.5);
        draw_text(&mut img, cx - text_width(&label, 1) / 2, rect.y1 + 6, 1, FG, &label);
    }
    img.save(path)?;
    Ok(())
}

/// Write a single-channel or RGB [0,1] image as an 8-bit PNG.
pub fn save_image32_png(path: &Path, img: &crate::dataset::Image32) -> Result<(), PlotError> {
    let (h, w) = (img.height as u32, img.width as u32);
    let mut out = RgbImage::new(w, h);
    for y in 0..img.height {
        for x in 0..img.width {
            let px = if img.channels == 1 {
                let v = (img.get(y, x, 0).clamp(0.0, 1.0) * 255.0).round() as u8;
                [v, v, v]
            } else {
                let mut px = [0u8; 3];
                for (c, slot) in px.iter_mut().enumerate() {
                    *slot = (img.get(y, x, c.min(img.channels - 1)).clamp(0.0, 1.0) * 255.0).round() as u8;
                }
                px
            };
            out.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    out.save(path)?;
    Ok(())
}
