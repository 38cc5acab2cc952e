//! Static line charts rendered straight to PNG.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 480;
const MARGIN: i64 = 56;
const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [23, 190, 207],
];

/// 3×5 glyphs for tick labels, one row per `u8`, high bit on the left.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        'e' => [0, 7, 7, 4, 7],
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axes {
    pub x: (f64, f64),
    pub y: (f64, f64),
    /// Plot `log10(y)`; non-positive values are dropped.
    pub log_y: bool,
}

impl Axes {
    /// Bounds covering every point.
    pub fn fit(series: &[Series], log_y: bool) -> Result<Self> {
        let pts = series
            .iter()
            .flat_map(|s| s.points.iter().copied())
            .filter(|p| p.0.is_finite() && p.1.is_finite() && (!log_y || p.1 > 0.0));
        let (mut x, mut y) = ((f64::INFINITY, f64::NEG_INFINITY), (f64::INFINITY, f64::NEG_INFINITY));
        for (px, py) in pts {
            let py = if log_y { py.log10() } else { py };
            x = (x.0.min(px), x.1.max(px));
            y = (y.0.min(py), y.1.max(py));
        }
        if !x.0.is_finite() {
            return Err(Error::InvalidArgument("nothing to plot".into()));
        }
        let widen = |(lo, hi): (f64, f64)| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        Ok(Self {
            x: widen(x),
            y: widen(y),
            log_y,
        })
    }
}

struct Canvas {
    img: RgbImage,
    axes: Axes,
}

impl Canvas {
    fn new(axes: Axes) -> Self {
        Self {
            img: RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255])),
            axes,
        }
    }

    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as u32) < WIDTH && (y as u32) < HEIGHT {
            self.img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    }

    fn to_px(&self, x: f64, y: f64) -> (i64, i64) {
        let a = self.axes;
        let (w, h) = ((WIDTH as i64 - 2 * MARGIN) as f64, (HEIGHT as i64 - 2 * MARGIN) as f64);
        let fx = (x - a.x.0) / (a.x.1 - a.x.0);
        let fy = (y - a.y.0) / (a.y.1 - a.y.0);
        (MARGIN + (fx * w).round() as i64, HEIGHT as i64 - MARGIN - (fy * h).round() as i64)
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, c);
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

    fn text(&mut self, s: &str, x: i64, y: i64) {
        for (i, ch) in s.chars().enumerate() {
            let Some(rows) = glyph(ch) else { continue };
            for (r, bits) in rows.iter().enumerate() {
                for col in 0..3 {
                    if bits & (4 >> col) != 0 {
                        for (ox, oy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                            self.put(x + i as i64 * 8 + col * 2 + ox, y + r as i64 * 2 + oy, [0, 0, 0]);
                        }
                    }
                }
            }
        }
    }

    fn frame(&mut self) {
        let (l, r) = (MARGIN, WIDTH as i64 - MARGIN);
        let (t, b) = (MARGIN, HEIGHT as i64 - MARGIN);
        let grey = [220, 220, 220];
        for k in 1..4 {
            let gx = l + (r - l) * k / 4;
            let gy = t + (b - t) * k / 4;
            self.line((gx, t), (gx, b), grey);
            self.line((l, gy), (r, gy), grey);
        }
        for (a, z) in [((l, b), (r, b)), ((l, t), (l, b)), ((l, t), (r, t)), ((r, t), (r, b))] {
            self.line(a, z, [0, 0, 0]);
        }
        let a = self.axes;
        let fmt = |v: f64| {
            if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
                format!("{v:.1e}")
            } else {
                format!("{v:.2}")
            }
        };
        let ylab = |v: f64| if a.log_y { fmt(10f64.powf(v)) } else { fmt(v) };
        self.text(&fmt(a.x.0), l, b + 8);
        let xs = fmt(a.x.1);
        self.text(&xs, r - xs.len() as i64 * 8, b + 8);
        self.text(&ylab(a.y.0), 2, b - 5);
        self.text(&ylab(a.y.1), 2, t - 5);
    }
}

/// Renders `series` as polylines on shared axes.
pub fn line_chart(series: &[Series], axes: Axes) -> RgbImage {
    let mut c = Canvas::new(axes);
    c.frame();
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<(i64, i64)> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite() && (!axes.log_y || p.1 > 0.0))
            .map(|&(x, y)| c.to_px(x, if axes.log_y { y.log10() } else { y }))
            .collect();
        for w in pts.windows(2) {
            c.line(w[0], w[1], color);
        }
        for &(x, y) in &pts {
            for d in -1..=1 {
                c.put(x + d, y, color);
                c.put(x, y + d, color);
            }
        }
    }
    c.img
}

pub fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
