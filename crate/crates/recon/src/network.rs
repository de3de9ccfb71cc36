//! Multi-contrast feature fusion and the encoder-decoder denoiser.

use mcmap_diffkit::{Array, Bound, Graph, ParamStore, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Feature channels per contrast.
    pub n_features: usize,
    /// Channel widths of the full- and half-resolution denoiser stages.
    pub widths: [usize; 2],
    pub unrolls: usize,
    pub cg_iterations: usize,
    pub rho_init: f64,
    /// Standard deviation of the final denoiser convolution at initialization.
    pub out_init_std: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { n_features: 16, widths: [16, 32], unrolls: 5, cg_iterations: 5, rho_init: 0.1, out_init_std: 1e-3 }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_features == 0 || self.widths.contains(&0) {
            return Err(Error::Config("feature and stage widths must be positive".into()));
        }
        if !(self.rho_init > 0.0 && self.rho_init.is_finite()) {
            return Err(Error::Config(format!("initial penalty must be positive, got {}", self.rho_init)));
        }
        if !(self.out_init_std >= 0.0) {
            return Err(Error::Config("output init std must be >= 0".into()));
        }
        Ok(())
    }
}

fn conv_param(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cout: usize, cin: usize, k: usize, std: Option<f64>) {
    let fan_in = (cin * k * k) as f64;
    let sd = std.unwrap_or((2.0 / fan_in).sqrt());
    let n = cout * cin * k * k;
    let w: Vec<f64> = if sd > 0.0 {
        let d = Normal::new(0.0, sd).expect("positive std");
        (0..n).map(|_| d.sample(rng)).collect()
    } else {
        vec![0.0; n]
    };
    store.insert(&format!("{name}.w"), Array::real(&[cout, cin, k, k], w), "weight");
    store.insert(&format!("{name}.b"), Array::real(&[cout], vec![0.0; cout]), "bias");
}

/// Fresh network parameters for `n_contrasts` contrasts.
pub fn init_params(cfg: &NetConfig, n_contrasts: usize, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let nf = cfg.n_features;
    let [w1, w2] = cfg.widths;
    conv_param(&mut s, &mut rng, "fusion.nm", nf, 2, 3, None);
    conv_param(&mut s, &mut rng, "fusion.nh", nf, nf, 3, None);
    conv_param(&mut s, &mut rng, "fusion.ns", nf, 2, 3, None);
    conv_param(&mut s, &mut rng, "unet.in", w1, n_contrasts * nf, 1, None);
    conv_param(&mut s, &mut rng, "unet.enc1", w1, w1, 3, None);
    conv_param(&mut s, &mut rng, "unet.enc2a", w2, w1, 3, None);
    conv_param(&mut s, &mut rng, "unet.enc2b", w2, w2, 3, None);
    conv_param(&mut s, &mut rng, "unet.dec1", w1, w1 + w2, 3, None);
    conv_param(&mut s, &mut rng, "unet.out", 2 * n_contrasts, w1, 3, Some(cfg.out_init_std));
    s.insert("admm.log_rho", Array::real(&[cfg.unrolls], vec![cfg.rho_init.ln(); cfg.unrolls]), "penalty");
    s
}

fn conv(g: &mut Graph, b: &Bound, x: Var, name: &str) -> Result<Var> {
    let (w, bias) = (b.var(&format!("{name}.w")), b.var(&format!("{name}.b")));
    Ok(g.conv2d(x, w, Some(bias))?)
}

fn conv_relu(g: &mut Graph, b: &Bound, x: Var, name: &str) -> Result<Var> {
    let y = conv(g, b, x, name)?;
    Ok(g.relu(y)?)
}

/// Per-contrast features from packed images `s[j]: [2,H,W]`.
///
/// With fusion, echoes follow `h_j = ReLU(N_m(s_j) + N_h(h_{j-1}))` from
/// `h_0 = 0`, single-echo contrasts use `N_s`, then echo features gain the sum
/// of the single-echo features and single-echo features gain the first echo's
/// feature (taken before its own update). Without fusion, echoes use
/// `ReLU(N_m(s_j))` and single-echo contrasts `N_s(s_j)`.
pub fn fuse_features(g: &mut Graph, b: &Bound, s: &[Var], n_echoes: usize, fusion: bool) -> Result<Vec<Var>> {
    if s.len() != n_echoes + 3 || n_echoes == 0 {
        return Err(Error::Dims(format!("{} contrasts for {n_echoes} echoes", s.len())));
    }
    let mut h = Vec::with_capacity(s.len());
    if fusion {
        let (_, hh, ww) = match g.value(s[0]).shape[..] {
            [c, hh, ww] => (c, hh, ww),
            _ => return Err(Error::Dims("packed image must be [2,H,W]".into())),
        };
        // N_h(h_0) with h_0 = 0 reduces to its bias
        let nf = g.value(b.var("fusion.nh.b")).len();
        let zero_in = g.constant(Array::real(&[1, hh, ww], vec![0.0; hh * ww]));
        let zero_k = g.constant(Array::real(&[nf, 1, 1, 1], vec![0.0; nf]));
        let mut prev = g.conv2d(zero_in, zero_k, Some(b.var("fusion.nh.b")))?;
        for &sj in &s[..n_echoes] {
            let m = conv(g, b, sj, "fusion.nm")?;
            let sum = g.add(m, prev)?;
            let hj = g.relu(sum)?;
            h.push(hj);
            if h.len() < n_echoes {
                prev = conv(g, b, hj, "fusion.nh")?;
            }
        }
    } else {
        for &sj in &s[..n_echoes] {
            h.push(conv_relu(g, b, sj, "fusion.nm")?);
        }
    }
    for &sj in &s[n_echoes..] {
        h.push(conv(g, b, sj, "fusion.ns")?);
    }
    if fusion {
        let singles = g.add(h[n_echoes], h[n_echoes + 1])?;
        let singles = g.add(singles, h[n_echoes + 2])?;
        let first = h[0];
        for hj in h.iter_mut().take(n_echoes) {
            *hj = g.add(*hj, singles)?;
        }
        for hj in h.iter_mut().skip(n_echoes) {
            *hj = g.add(*hj, first)?;
        }
    }
    Ok(h)
}

/// Residual denoiser on complex images `v: [C,H,W]`: features, channel
/// concatenation, two-scale encoder-decoder with a skip connection, and
/// `z = v + correction`.
pub fn denoise(g: &mut Graph, b: &Bound, v: Var, n_echoes: usize, fusion: bool) -> Result<Var> {
    let c = g.value(v).shape[0];
    let packed = g.pack(v)?;
    let s: Vec<Var> = (0..c).map(|j| g.slice(packed, 2 * j, 2)).collect::<mcmap_diffkit::Result<_>>()?;
    let h = fuse_features(g, b, &s, n_echoes, fusion)?;
    let x = g.concat(&h)?;
    let a = conv_relu(g, b, x, "unet.in")?;
    let e1 = conv_relu(g, b, a, "unet.enc1")?;
    let d = g.avgpool2(e1)?;
    let e2 = conv_relu(g, b, d, "unet.enc2a")?;
    let e2 = conv_relu(g, b, e2, "unet.enc2b")?;
    let up = g.upsample2(e2)?;
    let cat = g.concat(&[up, e1])?;
    let d1 = conv_relu(g, b, cat, "unet.dec1")?;
    let out = conv(g, b, d1, "unet.out")?;
    let corr = g.unpack(out)?;
    Ok(g.add(v, corr)?)
}
