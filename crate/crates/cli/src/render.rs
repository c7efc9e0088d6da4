//! 8-bit PNG previews and static plots.

use std::path::Path;

use image::{Rgb, RgbImage};

use polguide::{Image, NormalMap};

use crate::error::{CliError, CliResult};

/// Error at or above this many degrees renders black.
pub const ERROR_RANGE_DEG: f64 = 45.0;

fn byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save(img: &RgbImage, path: &Path) -> CliResult<()> {
    img.save(path).map_err(|e| CliError::io(path, e))
}

/// `(n + 1) / 2` per component.
pub fn normals_png(n: &NormalMap, path: &Path) -> CliResult<()> {
    let img = RgbImage::from_fn(n.width() as u32, n.height() as u32, |x, y| {
        let v = n.at(y as usize, x as usize);
        Rgb(v.map(|c| byte((c + 1.0) / 2.0)))
    });
    save(&img, path)
}

/// Grayscale for one channel, direct RGB for three; values clamp to `[0, 1]`.
pub fn image_png(img: &Image, path: &Path) -> CliResult<()> {
    let c = img.channels();
    let out = RgbImage::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        let p = img.pixel(y as usize * img.width() + x as usize);
        if c == 3 {
            Rgb([byte(p[0]), byte(p[1]), byte(p[2])])
        } else {
            let m = p.iter().sum::<f64>() / c as f64;
            Rgb([byte(m); 3])
        }
    });
    save(&out, path)
}

/// Brighter is lower error; pixels without a value are dark red.
pub fn error_png(err: &Image, path: &Path) -> CliResult<()> {
    let out = RgbImage::from_fn(err.width() as u32, err.height() as u32, |x, y| {
        let e = err.at(y as usize, x as usize, 0);
        if e.is_nan() {
            Rgb([64, 0, 0])
        } else {
            Rgb([byte(1.0 - e / ERROR_RANGE_DEG); 3])
        }
    });
    save(&out, path)
}

const PLOT_W: u32 = 480;
const PLOT_H: u32 = 320;
const MARGIN: u32 = 32;
const COLORS: [[u8; 3]; 3] = [[200, 40, 40], [40, 90, 200], [40, 150, 60]];

struct Canvas {
    img: RgbImage,
    x_range: (f64, f64),
    y_range: (f64, f64),
}

impl Canvas {
    fn new(x_range: (f64, f64), y_max: f64) -> Self {
        let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
        for x in MARGIN..PLOT_W - MARGIN / 2 {
            img.put_pixel(x, PLOT_H - MARGIN, Rgb([0, 0, 0]));
        }
        for y in MARGIN / 2..=PLOT_H - MARGIN {
            img.put_pixel(MARGIN, y, Rgb([0, 0, 0]));
        }
        let y_max = if y_max > 0.0 && y_max.is_finite() {
            y_max * 1.1
        } else {
            1.0
        };
        Self {
            img,
            x_range,
            y_range: (0.0, y_max),
        }
    }

    fn to_px(&self, x: f64, y: f64) -> (f64, f64) {
        let (x0, x1) = self.x_range;
        let fx = if x1 > x0 { (x - x0) / (x1 - x0) } else { 0.5 };
        let fy = (y - self.y_range.0) / (self.y_range.1 - self.y_range.0);
        let w = (PLOT_W - MARGIN - MARGIN / 2 - 8) as f64;
        let h = (PLOT_H - MARGIN - MARGIN / 2) as f64;
        (
            MARGIN as f64 + 4.0 + fx * w,
            (PLOT_H - MARGIN) as f64 - fy.clamp(0.0, 1.0) * h,
        )
    }

    fn dot(&mut self, px: f64, py: f64, color: [u8; 3], r: i64) {
        for dy in -r..=r {
            for dx in -r..=r {
                let (x, y) = (px.round() as i64 + dx, py.round() as i64 + dy);
                if (0..PLOT_W as i64).contains(&x) && (0..PLOT_H as i64).contains(&y) {
                    self.img.put_pixel(x as u32, y as u32, Rgb(color));
                }
            }
        }
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), color: [u8; 3]) {
        let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
        for k in 0..=steps {
            let t = k as f64 / steps as f64;
            self.dot(a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1), color, 0);
        }
    }

    fn rect(&mut self, x0: f64, x1: f64, y: f64, color: [u8; 3]) {
        let base = (PLOT_H - MARGIN) as f64;
        for x in x0.round() as u32..x1.round() as u32 {
            for yy in y.round() as u32..base as u32 {
                self.img.put_pixel(x, yy, Rgb(color));
            }
        }
    }
}

/// Line plot of several series over shared x values; y starts at zero.
pub fn line_plot(xs: &[f64], series: &[&[f64]], path: &Path) -> CliResult<()> {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let y_max = series
        .iter()
        .flat_map(|s| s.iter())
        .copied()
        .fold(0.0, f64::max);
    let mut c = Canvas::new((lo, hi), y_max);
    for (k, ys) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<_> = xs
            .iter()
            .zip(ys.iter())
            .map(|(&x, &y)| c.to_px(x, y))
            .collect();
        for w in pts.windows(2) {
            c.line(w[0], w[1], color);
        }
        for &(px, py) in &pts {
            c.dot(px, py, color, 2);
        }
    }
    save(&c.img, path)
}

/// Grouped bar chart: one group per row of `groups`, one bar per entry.
pub fn bar_plot(groups: &[Vec<f64>], path: &Path) -> CliResult<()> {
    let y_max = groups.iter().flatten().copied().fold(0.0, f64::max);
    let mut c = Canvas::new((0.0, 1.0), y_max);
    let n = groups.len().max(1) as f64;
    let left = (MARGIN + 8) as f64;
    let span = (PLOT_W - MARGIN - MARGIN / 2 - 16) as f64 / n;
    for (g, bars) in groups.iter().enumerate() {
        let bw = span * 0.8 / bars.len().max(1) as f64;
        for (k, &v) in bars.iter().enumerate() {
            let x0 = left + g as f64 * span + span * 0.1 + k as f64 * bw;
            let (_, y) = c.to_px(0.0, v);
            c.rect(x0, x0 + bw - 1.0, y, COLORS[k % COLORS.len()]);
        }
    }
    save(&c.img, path)
}
