#![allow(dead_code)]

use std::rc::Rc;

use mcmap_core::phantom::{synthesize_coils, CoilProfile};
use mcmap_core::volume::Dims3;
use mcmap_recon::forward::Coils;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn coils(ny: usize, nz: usize, n_coils: usize, seed: u64) -> Rc<Coils> {
    let mut set = synthesize_coils(Dims3::new(1, ny, nz), n_coils, seed, CoilProfile::Gaussian).unwrap();
    set.normalize_rss();
    Rc::new(Coils::from_set(&set).unwrap())
}

pub fn flat_coil(ny: usize, nz: usize) -> Rc<Coils> {
    let set = synthesize_coils(Dims3::new(1, ny, nz), 1, 0, CoilProfile::Flat).unwrap();
    Rc::new(Coils::from_set(&set).unwrap())
}

pub fn cnoise(rng: &mut ChaCha8Rng, n: usize) -> Vec<Complex64> {
    (0..n).map(|_| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))).collect()
}

pub fn images(rng: &mut ChaCha8Rng, c: usize, n: usize) -> Vec<Vec<Complex64>> {
    (0..c).map(|_| cnoise(rng, n)).collect()
}

pub fn binary_masks(rng: &mut ChaCha8Rng, c: usize, n: usize, p: f64) -> Vec<Vec<f64>> {
    (0..c).map(|_| (0..n).map(|_| if rng.random::<f64>() < p { 1.0 } else { 0.0 }).collect()).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn norm(x: &[Vec<Complex64>]) -> f64 {
    x.iter().flatten().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

pub fn diff_norm(a: &[Vec<Complex64>], b: &[Vec<Complex64>]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(p, q)| (p - q).norm_sqr()).sum::<f64>().sqrt()
}

/// `sum conj(a) b` over nested planes.
pub fn inner<'a>(a: impl IntoIterator<Item = &'a Complex64>, b: impl IntoIterator<Item = &'a Complex64>) -> Complex64 {
    a.into_iter().zip(b).map(|(p, q)| p.conj() * q).sum()
}
