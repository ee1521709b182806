//! Minimal line and bar charts rendered straight into PNG pixels.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::Result;

const W: u32 = 640;
const H: u32 = 360;
const MARGIN: u32 = 30;
const PALETTE: [[u8; 3]; 6] = [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40], [148, 103, 189], [140, 86, 75]];

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    for x in MARGIN..W - MARGIN {
        img.put_pixel(x, H - MARGIN, Rgb([0, 0, 0]));
    }
    for y in MARGIN..=H - MARGIN {
        img.put_pixel(MARGIN, y, Rgb([0, 0, 0]));
    }
    img
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: Rgb<u8>) {
    let n = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        if x >= 0.0 && y >= 0.0 && (x as u32) < W && (y as u32) < H {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// One polyline per series over a shared y range.
pub fn line_plot(path: &Path, series: &[Vec<f64>]) -> Result<()> {
    let mut img = canvas();
    let (lo, hi) = range(series.iter().flatten().copied());
    let span_x = (W - 2 * MARGIN) as f64;
    let span_y = (H - 2 * MARGIN) as f64;
    for (k, s) in series.iter().enumerate() {
        let color = Rgb(PALETTE[k % PALETTE.len()]);
        let px = |i: usize, v: f64| {
            let x = MARGIN as f64 + span_x * i as f64 / (s.len().max(2) - 1) as f64;
            let y = (H - MARGIN) as f64 - span_y * (v - lo) / (hi - lo);
            (x, y)
        };
        for i in 1..s.len() {
            if s[i - 1].is_finite() && s[i].is_finite() {
                line(&mut img, px(i - 1, s[i - 1]), px(i, s[i]), color);
            }
        }
        if s.len() == 1 && s[0].is_finite() {
            let (x, y) = px(0, s[0]);
            line(&mut img, (x - 2.0, y), (x + 2.0, y), color);
        }
    }
    img.save(path)?;
    Ok(())
}

/// Vertical bars from zero, one per value.
pub fn bar_plot(path: &Path, values: &[f64]) -> Result<()> {
    let mut img = canvas();
    let (_, hi) = range(values.iter().copied().chain([0.0]));
    let span_y = (H - 2 * MARGIN) as f64;
    let slot = (W - 2 * MARGIN) as f64 / values.len().max(1) as f64;
    for (k, v) in values.iter().enumerate() {
        if !v.is_finite() || *v <= 0.0 {
            continue;
        }
        let color = Rgb(PALETTE[k % PALETTE.len()]);
        let x0 = MARGIN as f64 + slot * (k as f64 + 0.2);
        let x1 = MARGIN as f64 + slot * (k as f64 + 0.8);
        let top = (H - MARGIN) as f64 - span_y * v / hi;
        for x in x0 as u32..x1 as u32 {
            line(&mut img, (x as f64, (H - MARGIN - 1) as f64), (x as f64, top), color);
        }
    }
    img.save(path)?;
    Ok(())
}
