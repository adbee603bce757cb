//! Minimal raster plots: polylines and scatter points on a white canvas.

use image::{Rgb, RgbImage};

const MARGIN: u32 = 40;
const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

pub fn color(i: usize) -> Rgb<u8> {
    Rgb(PALETTE[i % PALETTE.len()])
}

/// Maps data coordinates into the plotting area of a `width × height` canvas.
#[derive(Debug, Clone, Copy)]
struct Axes {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    width: u32,
    height: u32,
}

impl Axes {
    fn fit(points: impl Iterator<Item = (f64, f64)>, width: u32, height: u32) -> Self {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for (x, y) in points {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        let pad = |lo: f64, hi: f64| if hi - lo < 1e-12 { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
        let (x0, x1) = pad(x0, x1);
        let (y0, y1) = pad(y0, y1);
        let ym = 0.05 * (y1 - y0);
        Self {
            x0,
            x1,
            y0: y0 - ym,
            y1: y1 + ym,
            width,
            height,
        }
    }

    fn to_pixel(self, x: f64, y: f64) -> (f64, f64) {
        let w = (self.width - 2 * MARGIN) as f64;
        let h = (self.height - 2 * MARGIN) as f64;
        let px = MARGIN as f64 + (x - self.x0) / (self.x1 - self.x0) * w;
        let py = (self.height - MARGIN) as f64 - (y - self.y0) / (self.y1 - self.y0) * h;
        (px, py)
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, (xa, ya): (f64, f64), (xb, yb): (f64, f64), c: Rgb<u8>) {
    let steps = (xb - xa).abs().max((yb - ya).abs()).ceil().max(1.0) as i64;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        put(img, (xa + t * (xb - xa)).round() as i64, (ya + t * (yb - ya)).round() as i64, c);
    }
}

fn frame(img: &mut RgbImage) {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let m = MARGIN as f64;
    let black = Rgb([0, 0, 0]);
    line(img, (m, h - m), (w - m, h - m), black);
    line(img, (m, m), (m, h - m), black);
}

/// One polyline per series; series are `(x, y)` point lists.
pub fn line_plot(series: &[Vec<(f64, f64)>], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let axes = Axes::fit(series.iter().flatten().copied(), width, height);
    frame(&mut img);
    for (i, s) in series.iter().enumerate() {
        for w in s.windows(2) {
            line(&mut img, axes.to_pixel(w[0].0, w[0].1), axes.to_pixel(w[1].0, w[1].1), color(i));
        }
        if let [p] = s.as_slice() {
            let (x, y) = axes.to_pixel(p.0, p.1);
            put(&mut img, x.round() as i64, y.round() as i64, color(i));
        }
    }
    img
}

/// Square markers, coloured by group.
pub fn scatter(points: &[(f64, f64, usize)], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let axes = Axes::fit(points.iter().map(|&(x, y, _)| (x, y)), width, height);
    frame(&mut img);
    for &(x, y, g) in points {
        let (px, py) = axes.to_pixel(x, y);
        for dx in -2..=2 {
            for dy in -2..=2 {
                put(&mut img, px.round() as i64 + dx, py.round() as i64 + dy, color(g));
            }
        }
    }
    img
}
