//! Static amplitude-vs-frequency bar chart, one panel per variable.

use image::{Rgb, RgbImage};

const WIDTH: u32 = 640;
const PANEL: u32 = 120;
const MARGIN: u32 = 12;

const COLORS: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

/// Bars sit at their frequency on a shared axis from 0 to the largest
/// frequency; heights share one scale across panels.
pub fn amplitude_bars(frequencies: &[f64], amplitude: &[Vec<f64>]) -> RgbImage {
    let panels = amplitude.len().max(1) as u32;
    let mut img = RgbImage::from_pixel(WIDTH, PANEL * panels, Rgb([255, 255, 255]));
    let f_max = frequencies.iter().copied().fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
    let a_max = amplitude.iter().flatten().copied().fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
    let plot_w = (WIDTH - 2 * MARGIN) as f64;
    let plot_h = (PANEL - 2 * MARGIN) as f64;
    let bar_w = ((plot_w / (frequencies.len().max(1) as f64 * 2.0)) as u32).max(1);

    for (n, row) in amplitude.iter().enumerate() {
        let top = n as u32 * PANEL;
        let base = top + PANEL - MARGIN;
        for x in MARGIN..WIDTH - MARGIN {
            img.put_pixel(x, base, Rgb([0, 0, 0]));
        }
        let color = Rgb(COLORS[n % COLORS.len()]);
        for (&f, &a) in frequencies.iter().zip(row) {
            let cx = MARGIN as f64 + (f.max(0.0) / f_max) * (plot_w - bar_w as f64);
            let h = ((a / a_max) * plot_h).round() as u32;
            let x0 = cx as u32;
            for x in x0..(x0 + bar_w).min(WIDTH - MARGIN) {
                for y in base.saturating_sub(h)..base {
                    img.put_pixel(x, y, color);
                }
            }
        }
    }
    img
}
