//! Differentiable channel-mean SSIM with a valid-window Gaussian filter.

use mcmap_core::metrics::{channel_range, filter_valid, gaussian_taps, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};

use crate::error::{shape_err, Result};

/// Adjoint of [`filter_valid`]: spreads an `oh x ow` map back onto `h x w`.
pub fn filter_valid_adjoint(g: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..oh {
        for x in 0..ow {
            let v = g[y * ow + x];
            for t in 0..k {
                rows[(y + t) * ow + x] += taps[t] * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..ow {
            let v = rows[y * ow + x];
            for t in 0..k {
                out[y * w + x + t] += taps[t] * v;
            }
        }
    }
    out
}

struct Moments {
    mx: Vec<f64>,
    my: Vec<f64>,
    sxx: Vec<f64>,
    syy: Vec<f64>,
    sxy: Vec<f64>,
    c1: f64,
    c2: f64,
}

fn moments(x: &[f64], y: &[f64], h: usize, w: usize, taps: &[f64]) -> Moments {
    let f = |v: &[f64]| filter_valid(v, h, w, taps).0;
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let range = channel_range(y);
    Moments { mx: f(x), my: f(y), sxx: f(&xx), syy: f(&yy), sxy: f(&xy), c1: (SSIM_K1 * range).powi(2), c2: (SSIM_K2 * range).powi(2) }
}

fn check(c: usize, h: usize, w: usize) -> Result<()> {
    if c == 0 || h < SSIM_WINDOW || w < SSIM_WINDOW {
        return shape_err("ssim", format!("need at least one {SSIM_WINDOW}x{SSIM_WINDOW} channel, got {c}x{h}x{w}"));
    }
    Ok(())
}

pub fn ssim_forward(x: &[f64], y: &[f64], c: usize, h: usize, w: usize) -> Result<f64> {
    check(c, h, w)?;
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let hw = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let m = moments(&x[ch * hw..(ch + 1) * hw], &y[ch * hw..(ch + 1) * hw], h, w, &taps);
        let n = m.mx.len();
        let mut s = 0.0;
        for i in 0..n {
            let (a, b) = (m.mx[i], m.my[i]);
            let a1 = 2.0 * a * b + m.c1;
            let a2 = 2.0 * (m.sxy[i] - a * b) + m.c2;
            let b1 = a * a + b * b + m.c1;
            let b2 = (m.sxx[i] - a * a) + (m.syy[i] - b * b) + m.c2;
            s += a1 * a2 / (b1 * b2);
        }
        total += s / n as f64;
    }
    Ok(total / c as f64)
}

/// Gradient of `g * ssim(x, y)` with respect to `x`.
pub fn ssim_backward(x: &[f64], y: &[f64], c: usize, h: usize, w: usize, g: f64) -> Vec<f64> {
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    for ch in 0..c {
        let (xc, yc) = (&x[ch * hw..(ch + 1) * hw], &y[ch * hw..(ch + 1) * hw]);
        let m = moments(xc, yc, h, w, &taps);
        let n = m.mx.len();
        let scale = g / (c * n) as f64;
        let (mut d_mu, mut d_xx, mut d_xy) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            let (a, b) = (m.mx[i], m.my[i]);
            let a1 = 2.0 * a * b + m.c1;
            let a2 = 2.0 * (m.sxy[i] - a * b) + m.c2;
            let b1 = a * a + b * b + m.c1;
            let b2 = (m.sxx[i] - a * a) + (m.syy[i] - b * b) + m.c2;
            let s = a1 * a2 / (b1 * b2);
            d_mu[i] = scale * s * (2.0 * b / a1 - 2.0 * b / a2 - 2.0 * a / b1 + 2.0 * a / b2);
            d_xx[i] = -scale * s / b2;
            d_xy[i] = scale * 2.0 * s / a2;
        }
        let (t_mu, t_xx, t_xy) =
            (filter_valid_adjoint(&d_mu, h, w, &taps), filter_valid_adjoint(&d_xx, h, w, &taps), filter_valid_adjoint(&d_xy, h, w, &taps));
        for i in 0..hw {
            out[ch * hw + i] = t_mu[i] + 2.0 * xc[i] * t_xx[i] + yc[i] * t_xy[i];
        }
    }
    out
}
