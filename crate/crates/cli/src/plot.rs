//! Static PNG line and bar charts.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{bail, Context, Result};

const W: usize = 640;
const H: usize = 400;
const MARGIN: usize = 40;
const COLORS: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

// 3x5 glyphs, one row per u8 (low 3 bits, msb left)
const GLYPHS: [(char, [u8; 5]); 13] = [
    ('0', [7, 5, 5, 5, 7]),
    ('1', [2, 6, 2, 2, 7]),
    ('2', [7, 1, 7, 4, 7]),
    ('3', [7, 1, 7, 1, 7]),
    ('4', [5, 5, 7, 1, 1]),
    ('5', [7, 4, 7, 1, 7]),
    ('6', [7, 4, 7, 5, 7]),
    ('7', [7, 1, 1, 1, 1]),
    ('8', [7, 5, 7, 5, 7]),
    ('9', [7, 5, 7, 1, 7]),
    ('.', [0, 0, 0, 0, 2]),
    ('-', [0, 0, 7, 0, 0]),
    ('e', [0, 7, 7, 4, 7]),
];

pub struct Canvas {
    w: usize,
    h: usize,
    px: Vec<u8>,
}

impl Canvas {
    pub fn new(w: usize, h: usize) -> Self {
        Self {
            w,
            h,
            px: vec![255; w * h * 3],
        }
    }

    fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            let i = (y as usize * self.w + x as usize) * 3;
            self.px[i..i + 3].copy_from_slice(&c);
        }
    }

    pub fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, c);
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

    pub fn fill(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: [u8; 3]) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.set(x, y, c);
            }
        }
    }

    /// Draws `s` at 2x scale; unsupported characters are skipped.
    pub fn text(&mut self, x: i64, y: i64, s: &str) {
        let mut cx = x;
        for ch in s.chars() {
            if let Some((_, rows)) = GLYPHS.iter().find(|(g, _)| *g == ch) {
                for (r, bits) in rows.iter().enumerate() {
                    for b in 0..3 {
                        if bits & (4 >> b) != 0 {
                            self.fill(cx + 2 * b, y + 2 * r as i64, cx + 2 * b + 1, y + 2 * r as i64 + 1, [0, 0, 0]);
                        }
                    }
                }
            }
            cx += 8;
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.w as u32, self.h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.write_header()?.write_image_data(&self.px)?;
        Ok(())
    }
}

fn label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

fn axes(c: &mut Canvas, (ymin, ymax): (f64, f64), (xmin, xmax): (f64, f64)) {
    let (l, b) = (MARGIN as i64, (H - MARGIN) as i64);
    c.line((l, MARGIN as i64 / 2), (l, b), [0, 0, 0]);
    c.line((l, b), ((W - MARGIN / 2) as i64, b), [0, 0, 0]);
    c.text(2, MARGIN as i64 / 2, &label(ymax));
    c.text(2, b - 10, &label(ymin));
    c.text(l, b + 8, &label(xmin));
    c.text((W - 2 * MARGIN) as i64, b + 8, &label(xmax));
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// One polyline per series over shared axes.
pub fn line_plot(series: &[Vec<(f64, f64)>], path: &Path) -> Result<()> {
    let pts: Vec<(f64, f64)> = series.iter().flatten().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    if pts.is_empty() {
        bail!("nothing to plot");
    }
    let (xmin, xmax) = range(pts.iter().map(|p| p.0));
    let (ymin, ymax) = range(pts.iter().map(|p| p.1));
    let mut c = Canvas::new(W, H);
    axes(&mut c, (ymin, ymax), (xmin, xmax));
    let to_px = |(x, y): (f64, f64)| {
        let u = MARGIN as f64 + (x - xmin) / (xmax - xmin) * (W - 3 * MARGIN / 2) as f64;
        let v = (H - MARGIN) as f64 - (y - ymin) / (ymax - ymin) * (H - 3 * MARGIN / 2) as f64;
        (u.round() as i64, v.round() as i64)
    };
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        for w in s.windows(2) {
            c.line(to_px(w[0]), to_px(w[1]), color);
        }
        for &p in s {
            let (x, y) = to_px(p);
            c.fill(x - 1, y - 1, x + 1, y + 1, color);
        }
    }
    c.save(path)
}

/// Groups of bars (e.g. one group per fold, one bar per metric) from 0 up.
pub fn bar_plot(groups: &[Vec<f64>], path: &Path) -> Result<()> {
    let n = groups.iter().map(Vec::len).max().unwrap_or(0);
    if groups.is_empty() || n == 0 {
        bail!("nothing to plot");
    }
    let ymax = groups.iter().flatten().fold(0.0f64, |a, &v| a.max(v)).max(1e-9);
    let mut c = Canvas::new(W, H);
    axes(&mut c, (0.0, ymax), (0.0, groups.len() as f64));
    let slot = (W - 3 * MARGIN / 2) as f64 / groups.len() as f64;
    let bar = slot / (n as f64 + 1.0);
    let base = (H - MARGIN) as i64;
    for (g, vals) in groups.iter().enumerate() {
        for (k, &v) in vals.iter().enumerate() {
            let x0 = MARGIN as f64 + g as f64 * slot + (k as f64 + 0.5) * bar;
            let top = base - (v.max(0.0) / ymax * (H - 3 * MARGIN / 2) as f64).round() as i64;
            c.fill(x0 as i64, top, (x0 + bar) as i64 - 1, base - 1, COLORS[k % COLORS.len()]);
        }
    }
    c.save(path)
}
