//! Raster plots: log-power spectrograms and loss curves.

use std::path::Path;

use anyhow::{Context, Result};
use image::{GrayImage, Luma, Rgb, RgbImage};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

pub const N_FFT: usize = 256;
pub const HOP: usize = 64;
const DYNAMIC_RANGE_DB: f32 = 80.0;

/// Power in dB, `[frames][N_FFT / 2 + 1]`, Hann-windowed.
pub fn spectrogram(samples: &[f32]) -> Vec<Vec<f32>> {
    let mut planner = FftPlanner::<f32>::new();
    let fft = planner.plan_fft_forward(N_FFT);
    let window: Vec<f32> = (0..N_FFT)
        .map(|i| 0.5 - 0.5 * (std::f32::consts::TAU * i as f32 / N_FFT as f32).cos())
        .collect();
    let frames = if samples.len() <= N_FFT {
        1
    } else {
        (samples.len() - N_FFT).div_ceil(HOP) + 1
    };
    (0..frames)
        .map(|f| {
            let mut buf: Vec<Complex<f32>> = (0..N_FFT)
                .map(|i| {
                    let x = samples.get(f * HOP + i).copied().unwrap_or(0.0);
                    Complex::new(x * window[i], 0.0)
                })
                .collect();
            fft.process(&mut buf);
            buf[..N_FFT / 2 + 1]
                .iter()
                .map(|c| 10.0 * (c.norm_sqr() + 1e-10).log10())
                .collect()
        })
        .collect()
}

/// Time on the x axis, frequency upwards; the loudest bin is white and
/// anything `DYNAMIC_RANGE_DB` below it black.
pub fn spectrogram_image(samples: &[f32]) -> GrayImage {
    let spec = spectrogram(samples);
    let bins = N_FFT / 2 + 1;
    let top = spec.iter().flatten().copied().fold(f32::NEG_INFINITY, f32::max);
    let floor = top - DYNAMIC_RANGE_DB;
    let mut img = GrayImage::new(spec.len() as u32, bins as u32);
    for (x, frame) in spec.iter().enumerate() {
        for (b, &v) in frame.iter().enumerate() {
            let level = ((v - floor) / DYNAMIC_RANGE_DB).clamp(0.0, 1.0);
            img.put_pixel(x as u32, (bins - 1 - b) as u32, Luma([(level * 255.0).round() as u8]));
        }
    }
    img
}

pub fn save_spectrogram(samples: &[f32], path: &Path) -> Result<()> {
    spectrogram_image(samples)
        .save(path)
        .with_context(|| format!("writing {}", path.display()))
}

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: u32 = 40;

/// Line plot of `(x, y)` points on fitted axes.
pub fn curve_image(points: &[(f64, f64)]) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let axis = Rgb([120, 120, 120]);
    for x in MARGIN..WIDTH - MARGIN {
        img.put_pixel(x, HEIGHT - MARGIN, axis);
    }
    for y in MARGIN..=HEIGHT - MARGIN {
        img.put_pixel(MARGIN, y, axis);
    }
    if points.is_empty() {
        return img;
    }
    let (mut x0, mut x1) = bounds(points.iter().map(|p| p.0));
    let (mut y0, mut y1) = bounds(points.iter().map(|p| p.1));
    if x1 <= x0 {
        x0 -= 1.0;
        x1 += 1.0;
    }
    if y1 <= y0 {
        y0 -= 1.0;
        y1 += 1.0;
    }
    let w = (WIDTH - 2 * MARGIN) as f64;
    let h = (HEIGHT - 2 * MARGIN) as f64;
    let to_px = |(x, y): (f64, f64)| {
        let px = MARGIN as f64 + (x - x0) / (x1 - x0) * w;
        let py = (HEIGHT - MARGIN) as f64 - (y - y0) / (y1 - y0) * h;
        (px.round() as i64, py.round() as i64)
    };
    let line = Rgb([30, 90, 200]);
    let mut prev = to_px(points[0]);
    put(&mut img, prev, line);
    for &p in &points[1..] {
        let next = to_px(p);
        draw_line(&mut img, prev, next, line);
        prev = next;
    }
    img
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn put(img: &mut RgbImage, (x, y): (i64, i64), c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn draw_line(img: &mut RgbImage, (mut x, mut y): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let dx = (x1 - x).abs();
    let dy = -(y1 - y).abs();
    let sx = if x < x1 { 1 } else { -1 };
    let sy = if y < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(img, (x, y), c);
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

pub fn save_curve(points: &[(f64, f64)], path: &Path) -> Result<()> {
    curve_image(points)
        .save(path)
        .with_context(|| format!("writing {}", path.display()))
}
