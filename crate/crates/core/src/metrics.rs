//! Evaluation metrics: SSIM, no-reference blurriness, Bland-Altman agreement
//! and region statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::Region;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalized 1D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h x w` image.
pub fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|t| taps[t] * img[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|t| taps[t] * rows[(y + t) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM of one channel; `range` is the dynamic range of the reference.
pub fn ssim_channel(x: &[f64], y: &[f64], h: usize, w: usize, range: f64) -> f64 {
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let f = |v: &[f64]| filter_valid(v, h, w, &taps).0;
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (mx, my, sxx, syy, sxy) = (f(x), f(y), f(&xx), f(&yy), f(&xy));
    let n = mx.len();
    let mut total = 0.0;
    for i in 0..n {
        let (a, b) = (mx[i], my[i]);
        let vx = sxx[i] - a * a;
        let vy = syy[i] - b * b;
        let cxy = sxy[i] - a * b;
        total += ((2.0 * a * b + c1) * (2.0 * cxy + c2)) / ((a * a + b * b + c1) * (vx + vy + c2));
    }
    total / n as f64
}

/// Dynamic range `max - min` of a reference channel, 1 for constant channels.
pub fn channel_range(y: &[f64]) -> f64 {
    let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let r = hi - lo;
    if r > 0.0 { r } else { 1.0 }
}

/// Mean over channels of per-channel SSIM; `y` is the reference.
pub fn ssim_eval(x: &[Vec<f64>], y: &[Vec<f64>], h: usize, w: usize) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dims(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    for (a, b) in x.iter().zip(y) {
        if a.len() != h * w || b.len() != h * w {
            return Err(Error::LengthMismatch(a.len(), b.len()));
        }
    }
    let s: f64 = x.iter().zip(y).map(|(a, b)| ssim_channel(a, b, h, w, channel_range(b))).sum();
    Ok(s / x.len() as f64)
}

/// Crete-style blurriness in `[0, 1]` (lower is sharper) of an `h x w` image.
pub fn blurriness(img: &[f64], h: usize, w: usize) -> Result<f64> {
    const K: isize = 9;
    if img.len() != h * w {
        return Err(Error::LengthMismatch(img.len(), h * w));
    }
    if h < 2 || w < 2 {
        return Err(Error::Dims("blurriness needs at least 2x2".into()));
    }
    let at = |y: usize, x: usize| img[y * w + x];
    let box_blur = |vertical: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut s, mut c) = (0.0, 0.0);
                for t in -(K / 2)..=(K / 2) {
                    let (yy, xx) = if vertical { (y as isize + t, x as isize) } else { (y as isize, x as isize + t) };
                    if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                        s += at(yy as usize, xx as usize);
                        c += 1.0;
                    }
                }
                out[y * w + x] = s / c;
            }
        }
        out
    };
    let mut score = 0.0f64;
    for vertical in [true, false] {
        let b = box_blur(vertical);
        let (mut sf, mut sv) = (0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let prev = if vertical {
                    if y == 0 { continue } else { (y - 1) * w + x }
                } else if x == 0 {
                    continue;
                } else {
                    y * w + x - 1
                };
                let i = y * w + x;
                let df = (img[i] - img[prev]).abs();
                let db = (b[i] - b[prev]).abs();
                sf += df;
                sv += (df - db).max(0.0);
            }
        }
        if sf <= 0.0 {
            return Ok(1.0);
        }
        score = score.max((sf - sv) / sf);
    }
    Ok(score.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlandAltmanResult {
    pub bias: f64,
    pub sd: f64,
    pub loa_low: f64,
    pub loa_high: f64,
    pub n: usize,
    /// `(mean, difference)` of every pair.
    pub pairs: Vec<(f64, f64)>,
}

pub fn bland_altman(a: &[f64], b: &[f64]) -> Result<BlandAltmanResult> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::TooFewSamples { need: 2, got: n });
    }
    let pairs: Vec<(f64, f64)> = a.iter().zip(b).map(|(x, y)| ((x + y) / 2.0, x - y)).collect();
    let bias = pairs.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let sd = (pairs.iter().map(|p| (p.1 - bias).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    Ok(BlandAltmanResult { bias, sd, loa_low: bias - 1.96 * sd, loa_high: bias + 1.96 * sd, n, pairs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiRow {
    pub region: u16,
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub count: usize,
}

/// Per-region mean and sample standard deviation over valid voxels.
pub fn roi_stats(map: &[f64], valid: &[bool], region_grid: &[u16], regions: &[Region]) -> Result<Vec<RoiRow>> {
    if map.len() != region_grid.len() || valid.len() != map.len() {
        return Err(Error::LengthMismatch(map.len(), region_grid.len()));
    }
    regions
        .iter()
        .map(|r| {
            let vals: Vec<f64> = (0..map.len()).filter(|&i| region_grid[i] == r.id && valid[i]).map(|i| map[i]).collect();
            if vals.is_empty() {
                return Err(Error::EmptyRegion(r.name.clone()));
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let sd = if vals.len() > 1 { (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
            Ok(RoiRow { region: r.id, name: r.name.clone(), mean, sd, count: vals.len() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_sum_to_one() {
        let g = gaussian_taps(11, 1.5);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(g[0], g[10]);
    }

    #[test]
    fn identical_images_have_unit_ssim() {
        let x: Vec<f64> = (0..256).map(|i| (i as f64 * 0.37).sin()).collect();
        assert!((ssim_eval(&[x.clone()], &[x], 16, 16).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_image_is_maximally_blurred() {
        assert_eq!(blurriness(&[2.0; 100], 10, 10).unwrap(), 1.0);
    }
}
