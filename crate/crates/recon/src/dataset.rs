//! Slice datasets built from simulated phantoms: multi-coil k-space, coil
//! sensitivities and fully sampled references.

use std::rc::Rc;

use mcmap_core::phantom::{make_phantom, susceptibility_to_field, synthesize_coils, CoilProfile, CoilSet, PhantomSpec, TissuePhantom};
use mcmap_core::sampling::calibration_block;
use mcmap_core::seqsim::{coil_combine, simulate_contrasts, synthesize_kspace, ContrastImageSet, SequenceParams};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::admm::SliceData;
use crate::error::{Error, Result};
use crate::forward::Coils;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_coils: usize,
    /// k-space noise standard deviation relative to the phantom's peak image magnitude.
    pub noise_rel: f64,
    pub train_phantoms: usize,
    pub val_slices: usize,
    pub test_phantoms: usize,
    /// Side of the fully sampled calibration block.
    pub calibration: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_coils: 8, noise_rel: 0.005, train_phantoms: 4, val_slices: 8, test_phantoms: 1, calibration: 8 }
    }
}

impl DataConfig {
    pub fn validate(&self, spec: &PhantomSpec) -> Result<()> {
        if self.n_coils == 0 {
            return Err(Error::Config("need at least one coil".into()));
        }
        if !(self.noise_rel >= 0.0) {
            return Err(Error::Config(format!("noise must be >= 0, got {}", self.noise_rel)));
        }
        if self.train_phantoms == 0 || self.test_phantoms == 0 {
            return Err(Error::Config("train and test splits need at least one phantom".into()));
        }
        if self.val_slices > spec.dims.nx {
            return Err(Error::Config(format!("{} validation slices from a {}-slice phantom", self.val_slices, spec.dims.nx)));
        }
        if self.calibration == 0 || self.calibration > spec.dims.ny.min(spec.dims.nz) {
            return Err(Error::Config(format!("calibration block {} does not fit the grid", self.calibration)));
        }
        if spec.dims.ny % 2 != 0 || spec.dims.nz % 2 != 0 {
            return Err(Error::Config("phase-encode grid must have even sides".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One normalized slice; `kspace` and `reference` share the scale `1 / norm`.
#[derive(Debug, Clone)]
pub struct Slice {
    pub data: SliceData,
    pub reference: Vec<Vec<Complex64>>,
    pub norm: f64,
    pub phantom_seed: u64,
    pub index: usize,
}

/// Everything simulated for one phantom.
#[derive(Debug, Clone)]
pub struct PhantomVolume {
    pub phantom: TissuePhantom,
    /// Noiseless contrast images.
    pub images: ContrastImageSet,
    pub slices: Vec<Slice>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub n_echoes: usize,
    pub ny: usize,
    pub nz: usize,
    pub train: Vec<Slice>,
    pub val: Vec<Slice>,
    pub test: Vec<Slice>,
}

/// Seed of the `i`-th phantom of `split`; splits draw from disjoint ranges.
pub fn phantom_seed(base: u64, split: Split, i: usize) -> u64 {
    let offset = match split {
        Split::Train => 0,
        Split::Val => 1000,
        Split::Test => 2000,
    };
    base.wrapping_mul(10_007).wrapping_add(offset + i as u64)
}

/// RSS-normalized coil sensitivities of a phantom.
pub fn coil_set(spec: &PhantomSpec, n_coils: usize) -> Result<CoilSet> {
    let mut coils = synthesize_coils(spec.dims, n_coils, spec.seed ^ 0x5eed_c011, CoilProfile::Gaussian)?;
    coils.normalize_rss();
    Ok(coils)
}

/// Simulates one phantom and all of its slices.
pub fn simulate_volume(spec: &PhantomSpec, seq: &SequenceParams, cfg: &DataConfig) -> Result<PhantomVolume> {
    let phantom = make_phantom(spec)?;
    let field = susceptibility_to_field(&phantom.chi_map(), phantom.dims, phantom.voxel_size, phantom.b0_dir, phantom.field_scale_hz_per_ppm)?;
    let images = simulate_contrasts(&phantom, seq, &field)?;
    let coils = coil_set(spec, cfg.n_coils)?;
    let sigma = cfg.noise_rel * images.max_abs();
    let calib = calibration_block(spec.dims.ny, spec.dims.nz, cfg.calibration);
    let slices = (0..phantom.dims.nx)
        .map(|ix| {
            let cs = coils.slice(ix);
            let img = images.slice(ix);
            let k = synthesize_kspace(&img, &cs, sigma, spec.seed.wrapping_mul(1_000_003).wrapping_add(ix as u64))?;
            let reference = coil_combine(&k, &cs).data;
            let peak = k
                .data
                .iter()
                .flatten()
                .flat_map(|kc| kc.iter().zip(&calib).filter(|(_, &c)| c).map(|(v, _)| v.norm()))
                .fold(0.0, f64::max);
            let norm = if peak > 0.0 { peak } else { 1.0 };
            let inv = 1.0 / norm;
            let kspace: Vec<Vec<Vec<Complex64>>> =
                k.data.into_iter().map(|per| per.into_iter().map(|kc| kc.into_iter().map(|v| v * inv).collect()).collect()).collect();
            let reference = reference.into_iter().map(|r| r.into_iter().map(|v| v * inv).collect()).collect();
            Ok(Slice {
                data: SliceData { coils: Rc::new(Coils::from_set(&cs)?), kspace: Rc::new(kspace) },
                reference,
                norm,
                phantom_seed: spec.seed,
                index: ix,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PhantomVolume { phantom, images, slices })
}

/// `n` items evenly spaced through `items`.
pub fn spaced_subset<T: Clone>(items: &[T], n: usize) -> Vec<T> {
    (0..n).map(|i| items[i * items.len() / n].clone()).collect()
}

/// Builds the train / validation / test split from a base phantom spec.
pub fn build_dataset(spec: &PhantomSpec, seq: &SequenceParams, cfg: &DataConfig, seed: u64) -> Result<(Dataset, Vec<PhantomVolume>)> {
    cfg.validate(spec)?;
    let volume = |split, i| simulate_volume(&PhantomSpec { seed: phantom_seed(seed, split, i), ..spec.clone() }, seq, cfg);
    let mut train = Vec::new();
    for i in 0..cfg.train_phantoms {
        train.extend(volume(Split::Train, i)?.slices);
    }
    let mut val = Vec::new();
    if cfg.val_slices > 0 {
        val = spaced_subset(&volume(Split::Val, 0)?.slices, cfg.val_slices);
    }
    let mut test = Vec::new();
    let mut test_volumes = Vec::new();
    for i in 0..cfg.test_phantoms {
        let v = volume(Split::Test, i)?;
        test.extend(v.slices.iter().cloned());
        test_volumes.push(v);
    }
    Ok((Dataset { n_echoes: seq.n_echoes(), ny: spec.dims.ny, nz: spec.dims.nz, train, val, test }, test_volumes))
}
