//! Quantitative maps from contrast images: dictionary-matched T1/T2, ARLO T2*,
//! and susceptibility via field fitting, background removal and thresholded
//! k-space division.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dipole::{convolve_real, dipole_kernel};
use crate::error::{Error, Result};
use crate::fft::{fftn, ifftn};
use crate::seqsim::{ContrastImageSet, Dictionary, SequenceParams};
use crate::volume::Dims3;

pub const T2STAR_MIN_MS: f64 = 1.0;
pub const T2STAR_MAX_MS: f64 = 2000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingConfig {
    pub tkd_threshold: f64,
    pub pdf_iterations: usize,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self { tkd_threshold: 0.2, pdf_iterations: 30 }
    }
}

impl MappingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tkd_threshold > 0.0 && self.tkd_threshold <= 1.0 / 3.0) {
            return Err(Error::Config(format!("TKD threshold {} outside (0, 1/3]", self.tkd_threshold)));
        }
        if self.pdf_iterations == 0 {
            return Err(Error::Config("PDF needs at least one CG iteration".into()));
        }
        Ok(())
    }
}

/// Geometry needed by the field-to-susceptibility stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldGeometry {
    pub voxel_size: [f64; 3],
    pub b0_dir: [f64; 3],
    pub scale_hz_per_ppm: f64,
}

/// Maps in ms, ms, ms and ppm. Invalid voxels are flagged in the per-map
/// validity masks and hold 0 in the value arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantMaps {
    pub dims: Dims3,
    pub t1: Vec<f64>,
    pub t2: Vec<f64>,
    pub t2s: Vec<f64>,
    pub chi: Vec<f64>,
    pub valid_t1t2: Vec<bool>,
    pub valid_t2s: Vec<bool>,
    pub valid_chi: Vec<bool>,
}

impl QuantMaps {
    pub fn valid_all(&self) -> Vec<bool> {
        (0..self.dims.len()).map(|i| self.valid_t1t2[i] && self.valid_t2s[i] && self.valid_chi[i]).collect()
    }
}

/// Index of the atom with the largest inner product with the unit-normalized signal.
pub fn match_index(signal: &[f64; 4], dict: &Dictionary) -> Option<usize> {
    let n = signal.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0 && n.is_finite()) || dict.atoms.is_empty() {
        return None;
    }
    let mut best = (f64::NEG_INFINITY, 0);
    for (k, a) in dict.atoms.iter().enumerate() {
        let ip = a[0] * signal[0] + a[1] * signal[1] + a[2] * signal[2] + a[3] * signal[3];
        if ip > best.0 {
            best = (ip, k);
        }
    }
    Some(best.1)
}

/// `(T1, T2)` of the best-matching atom; `None` for zero-norm signals.
pub fn match_dictionary(signal: &[f64; 4], dict: &Dictionary) -> Option<(f64, f64)> {
    match_index(signal, dict).map(|k| dict.pairs[k])
}

/// Closed-form T2* from equally spaced echo magnitudes via Simpson integrals.
pub fn fit_t2star_arlo(mags: &[f64], delta_te_ms: f64) -> Option<f64> {
    if mags.len() < 3 || !(delta_te_ms > 0.0) {
        return None;
    }
    let (mut sd, mut dd, mut yy) = (0.0, 0.0, 0.0);
    for w in mags.windows(3) {
        let s = delta_te_ms / 3.0 * (w[0] + 4.0 * w[1] + w[2]);
        let d = w[0] - w[2];
        sd += s * d;
        dd += d * d;
        yy += w[0] * w[0];
    }
    if !(yy > 0.0) || dd <= 1e-14 * yy || !sd.is_finite() {
        return None;
    }
    let t = sd / dd;
    if !(t > 0.0) {
        return None;
    }
    Some(t.clamp(T2STAR_MIN_MS, T2STAR_MAX_MS))
}

/// Weighted least-squares line `phi = phi0 + slope * te`.
fn weighted_line(te: &[f64], phi: &[f64], w: &[f64]) -> Option<(f64, f64)> {
    let sw: f64 = w.iter().sum();
    if !(sw > 0.0) {
        return None;
    }
    let mt = te.iter().zip(w).map(|(t, w)| t * w).sum::<f64>() / sw;
    let mp = phi.iter().zip(w).map(|(p, w)| p * w).sum::<f64>() / sw;
    let (mut stt, mut stp) = (0.0, 0.0);
    for i in 0..te.len() {
        stt += w[i] * (te[i] - mt) * (te[i] - mt);
        stp += w[i] * (te[i] - mt) * (phi[i] - mp);
    }
    if !(stt > 0.0) {
        return None;
    }
    let slope = stp / stt;
    Some((mp - slope * mt, slope))
}

/// Temporally unwrap echo phases; the first increment is predicted from a
/// zero-intercept estimate on the first echo, later ones from a fit of the
/// echoes unwrapped so far.
pub fn unwrap_echo_phases(phases: &[f64], mags: &[f64], te_ms: &[f64]) -> Vec<f64> {
    let mut out = phases.to_vec();
    if out.len() < 2 {
        return out;
    }
    let mut rate = out[0] / te_ms[0];
    for j in 1..out.len() {
        if j >= 2 {
            let w: Vec<f64> = mags[..j].iter().map(|m| (m * m).max(1e-300)).collect();
            if let Some((_, s)) = weighted_line(&te_ms[..j], &out[..j], &w) {
                rate = s;
            }
        }
        let predicted = out[j - 1] + rate * (te_ms[j] - te_ms[j - 1]);
        out[j] += 2.0 * PI * ((predicted - out[j]) / (2.0 * PI)).round();
    }
    out
}

/// Field (Hz) and intercept (rad) from echo phases, weights `|m|^2`.
pub fn fit_total_field(phases: &[f64], mags: &[f64], te_ms: &[f64]) -> Option<(f64, f64)> {
    if phases.len() < 2 || phases.len() != mags.len() || phases.len() != te_ms.len() {
        return None;
    }
    let w: Vec<f64> = mags.iter().map(|m| m * m).collect();
    if !(w.iter().sum::<f64>() > 0.0) {
        return None;
    }
    let un = unwrap_echo_phases(phases, mags, te_ms);
    let (phi0, slope) = weighted_line(te_ms, &un, &w)?;
    Some((slope * 1000.0 / (2.0 * PI), phi0))
}

/// Projection onto dipole fields: fit exterior sources to the in-mask field by
/// CG on the normal equations and return the masked residual.
pub fn remove_background_pdf(field: &[f64], mask: &[bool], dims: Dims3, geom: &FieldGeometry, iterations: usize) -> Result<Vec<f64>> {
    let n = dims.len();
    if field.len() != n || mask.len() != n {
        return Err(Error::LengthMismatch(field.len(), n));
    }
    let inside = mask.iter().filter(|&&m| m).count();
    if inside == 0 || inside == n {
        return Err(Error::EmptyRegion("PDF needs a nonempty mask with nonempty exterior".into()));
    }
    if field.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("total field"));
    }
    let kernel = dipole_kernel(dims, geom.voxel_size, geom.b0_dir);
    let masked = |v: &mut [f64]| v.iter_mut().zip(mask).for_each(|(x, &m)| if !m { *x = 0.0 });
    let exterior = |v: &mut [f64]| v.iter_mut().zip(mask).for_each(|(x, &m)| if m { *x = 0.0 });
    let normal = |x: &[f64]| {
        let mut y = convolve_real(x, &kernel, dims);
        masked(&mut y);
        let mut z = convolve_real(&y, &kernel, dims);
        exterior(&mut z);
        z
    };
    let mut rhs: Vec<f64> = field.to_vec();
    masked(&mut rhs);
    let mut b = convolve_real(&rhs, &kernel, dims);
    exterior(&mut b);

    let mut x = vec![0.0; n];
    let mut r = b;
    let mut p = r.clone();
    let mut rr: f64 = r.iter().map(|v| v * v).sum();
    let rr0 = rr;
    for _ in 0..iterations {
        if rr <= 1e-30 * rr0.max(1e-300) {
            break;
        }
        let ap = normal(&p);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if !(pap > 0.0) {
            break;
        }
        let alpha = rr / pap;
        x.iter_mut().zip(&p).for_each(|(x, p)| *x += alpha * p);
        r.iter_mut().zip(&ap).for_each(|(r, a)| *r -= alpha * a);
        let rr_new: f64 = r.iter().map(|v| v * v).sum();
        if !rr_new.is_finite() {
            return Err(Error::NonFinite("PDF conjugate gradient"));
        }
        let beta = rr_new / rr;
        rr = rr_new;
        p.iter_mut().zip(&r).for_each(|(p, r)| *p = r + beta * *p);
    }
    let bg = convolve_real(&x, &kernel, dims);
    let mut local: Vec<f64> = field.iter().zip(&bg).map(|(f, b)| f - b).collect();
    masked(&mut local);
    Ok(local)
}

/// Thresholded k-space division of a local field (Hz) into susceptibility (ppm), masked.
pub fn dipole_invert_tkd(local: &[f64], mask: &[bool], dims: Dims3, geom: &FieldGeometry, threshold: f64) -> Result<Vec<f64>> {
    if local.len() != dims.len() || mask.len() != dims.len() {
        return Err(Error::LengthMismatch(local.len(), dims.len()));
    }
    if !(threshold > 0.0 && threshold <= 1.0 / 3.0) {
        return Err(Error::Config(format!("TKD threshold {threshold} outside (0, 1/3]")));
    }
    if local.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("local field"));
    }
    let kernel = dipole_kernel(dims, geom.voxel_size, geom.b0_dir);
    let d = dims.as_array();
    let mut buf: Vec<Complex64> = local.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fftn(&mut buf, &d);
    for (b, &k) in buf.iter_mut().zip(&kernel) {
        let inv = if k == 0.0 {
            0.0
        } else if k.abs() >= threshold {
            1.0 / (geom.scale_hz_per_ppm * k)
        } else {
            k.signum() / (geom.scale_hz_per_ppm * threshold)
        };
        *b *= inv;
    }
    buf[0] = Complex64::new(0.0, 0.0);
    ifftn(&mut buf, &d);
    Ok(buf.iter().zip(mask).map(|(c, &m)| if m { c.re } else { 0.0 }).collect())
}

/// Subtract the mean over `mask` (values outside the mask untouched).
pub fn reference_to_mean(map: &mut [f64], mask: &[bool]) {
    let (s, n) = map.iter().zip(mask).filter(|(_, &m)| m).fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    if n > 0 {
        let mean = s / n as f64;
        map.iter_mut().zip(mask).filter(|(_, &m)| m).for_each(|(v, _)| *v -= mean);
    }
}

/// Signed 4-point signal `(IR1, first echo, IR2, T2prep)` of one voxel, with
/// the sign taken relative to the first echo's phase.
pub fn signed_four_point(images: &ContrastImageSet, i: usize) -> [f64; 4] {
    let e0 = images.data[0][i];
    let rot = if e0.norm() > 0.0 { e0.conj() / e0.norm() } else { Complex64::new(1.0, 0.0) };
    let s = |j: usize| (images.data[j][i] * rot).re;
    [s(images.ir1()), e0.norm(), s(images.ir2()), s(images.t2prep())]
}

/// All four maps from a volume of contrast images. Susceptibility is
/// referenced to its mean over the valid part of the mask.
pub fn derive_all_maps(
    images: &ContrastImageSet,
    mask: &[bool],
    seq: &SequenceParams,
    dict: &Dictionary,
    geom: &FieldGeometry,
    cfg: &MappingConfig,
) -> Result<QuantMaps> {
    cfg.validate()?;
    let dims = images.dims;
    let n = dims.len();
    if mask.len() != n {
        return Err(Error::LengthMismatch(mask.len(), n));
    }
    if images.n_echoes != seq.n_echoes() || images.n_contrasts() != seq.n_contrasts() {
        return Err(Error::Dims("contrast images do not match the sequence".into()));
    }
    let ne = images.n_echoes;
    let dte = seq.delta_te_ms();
    let mut maps = QuantMaps {
        dims,
        t1: vec![0.0; n],
        t2: vec![0.0; n],
        t2s: vec![0.0; n],
        chi: vec![0.0; n],
        valid_t1t2: vec![false; n],
        valid_t2s: vec![false; n],
        valid_chi: vec![false; n],
    };
    let mut field = vec![0.0; n];
    let mut field_ok = vec![false; n];
    for i in (0..n).filter(|&i| mask[i]) {
        if let Some((t1, t2)) = match_dictionary(&signed_four_point(images, i), dict) {
            maps.t1[i] = t1;
            maps.t2[i] = t2;
            maps.valid_t1t2[i] = true;
        }
        let mags: Vec<f64> = (0..ne).map(|j| images.data[j][i].norm()).collect();
        if ne >= 3 {
            if let Some(t) = fit_t2star_arlo(&mags, dte) {
                maps.t2s[i] = t;
                maps.valid_t2s[i] = true;
            }
        }
        let phases: Vec<f64> = (0..ne).map(|j| images.data[j][i].arg()).collect();
        if let Some((f, _)) = fit_total_field(&phases, &mags, &seq.te_mgre_ms) {
            field[i] = f;
            field_ok[i] = true;
        }
    }
    if field_ok.iter().any(|&v| v) {
        let local = remove_background_pdf(&field, &field_ok, dims, geom, cfg.pdf_iterations)?;
        let mut chi = dipole_invert_tkd(&local, &field_ok, dims, geom, cfg.tkd_threshold)?;
        reference_to_mean(&mut chi, &field_ok);
        maps.chi = chi;
        maps.valid_chi = field_ok;
    }
    Ok(maps)
}
