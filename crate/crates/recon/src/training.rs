//! Two-phase joint training of sampling weights and the reconstruction
//! network, and the four-way ablation.

use std::collections::BTreeMap;
use std::path::Path;

use mcmap_core::sampling::{calibration_block, draw_mask, elliptical_support, multilevel_density};
use mcmap_diffkit::{checkpoint, AdamState, Array, Graph, ParamStore, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::admm::{admm_unrolled, reconstruct_slice, zero_filled};
use crate::dataset::{Dataset, Slice};
use crate::error::{Error, Result};
use crate::forward::{images_to_array, masks_to_array};
use crate::mask::{weights_for_density, MaskDrawOp, MaskSpec};
use crate::network::{init_params, NetConfig};

pub const MASK_WEIGHTS: &str = "mask.w";
pub const FIXED_MASKS: &str = "mask.fixed";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Under-sampling factor; the target sampling ratio is `1 / r`.
    pub r: f64,
    /// Sigmoid slope of the probability map.
    pub slope: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub seed: u64,
    pub mask_opt: bool,
    pub fusion: bool,
    /// Levels of the multi-level density used to initialize (or freeze) the weights.
    pub density_levels: usize,
    pub calibration: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            r: 8.0,
            slope: 0.25,
            lr: 1e-3,
            batch_size: 1,
            epochs_phase1: 30,
            epochs_phase2: 10,
            seed: 0,
            mask_opt: true,
            fusion: true,
            density_levels: 4,
            calibration: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r >= 1.0 && self.r.is_finite()) {
            return Err(Error::Config(format!("R must be >= 1, got {}", self.r)));
        }
        if !(self.slope > 0.0 && self.slope.is_finite()) {
            return Err(Error::Config(format!("slope must be positive, got {}", self.slope)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size != 1 {
            return Err(Error::Config(format!("only batch size 1 is supported, got {}", self.batch_size)));
        }
        if self.density_levels == 0 || self.calibration == 0 {
            return Err(Error::Config("density levels and calibration size must be positive".into()));
        }
        Ok(())
    }

    /// Ablation label `{fusion}{mask_opt}`.
    pub fn variant(&self) -> String {
        format!("{}{}", self.fusion as u8, self.mask_opt as u8)
    }

    pub fn with_variant(&self, label: &str) -> Result<Self> {
        let (fusion, mask_opt) = parse_variant(label)?;
        Ok(Self { fusion, mask_opt, ..self.clone() })
    }

    pub fn mask_spec(&self, ny: usize, nz: usize) -> MaskSpec {
        MaskSpec {
            ny,
            nz,
            slope: self.slope,
            ratio: 1.0 / self.r,
            support: elliptical_support(ny, nz).cells,
            forced: calibration_block(ny, nz, self.calibration),
        }
    }
}

/// `"{fusion}{mask_opt}"` with digits in {0, 1}.
pub fn parse_variant(label: &str) -> Result<(bool, bool)> {
    let b = label.as_bytes();
    let bit = |c: u8| match c {
        b'0' => Ok(false),
        b'1' => Ok(true),
        _ => Err(Error::Config(format!("ablation label must be two binary digits, got {label:?}"))),
    };
    if b.len() != 2 {
        return Err(Error::Config(format!("ablation label must be two binary digits, got {label:?}")));
    }
    Ok((bit(b[0])?, bit(b[1])?))
}

pub const VARIANTS: [&str; 4] = ["00", "01", "10", "11"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub phase: u8,
    pub params: ParamStore,
    pub adam: AdamState,
    pub epoch: usize,
    pub history: Vec<LossRecord>,
    pub train: TrainConfig,
    pub net: NetConfig,
    pub n_echoes: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    phase: u8,
    adam: AdamState,
    epoch: usize,
    history: Vec<LossRecord>,
    train: TrainConfig,
    net: NetConfig,
    n_echoes: usize,
}

impl Checkpoint {
    /// Masks used at inference: the frozen binary masks of phase 2, or a seeded
    /// draw from the current probabilities.
    pub fn inference_masks(&self, ny: usize, nz: usize) -> Result<Vec<Vec<f64>>> {
        if let Some(m) = self.params.get(FIXED_MASKS) {
            return Ok(m.re().chunks(m.plane()).map(|c| c.to_vec()).collect());
        }
        let w = self.params.get(MASK_WEIGHTS).ok_or_else(|| Error::Missing("mask weights".into()))?;
        Ok(draw_from_weights(w, &self.train.mask_spec(ny, nz), validation_seed(self.train.seed)))
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            phase: self.phase,
            adam: self.adam.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
            train: self.train.clone(),
            net: self.net.clone(),
            n_echoes: self.n_echoes,
        };
        let v = serde_json::to_value(meta).map_err(|e| Error::Io(e.to_string()))?;
        checkpoint::save(stem, &self.params, v)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (params, v) = checkpoint::load(stem)?;
        let m: CheckpointMeta = serde_json::from_value(v).map_err(|e| Error::Io(e.to_string()))?;
        Ok(Self { phase: m.phase, params, adam: m.adam, epoch: m.epoch, history: m.history, train: m.train, net: m.net, n_echoes: m.n_echoes })
    }
}

fn validation_seed(seed: u64) -> u64 {
    seed ^ 0x7a11_da7e_5eed_0001
}

fn draw_from_weights(w: &Array, spec: &MaskSpec, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    w.re().chunks(w.plane()).map(|wj| draw_mask(&spec.probabilities(wj).p, &spec.forced, &mut rng)).collect()
}

/// Initial weights `[C, ny, nz]` reproducing the multi-level density.
pub fn initial_mask_weights(cfg: &TrainConfig, n_contrasts: usize, ny: usize, nz: usize) -> Result<Array> {
    let spec = cfg.mask_spec(ny, nz);
    let density = multilevel_density(ny, nz, 1.0 / cfg.r, cfg.density_levels, Some(&spec.support))?;
    let w = weights_for_density(&density, cfg.slope);
    Ok(Array::real(&[n_contrasts, ny, nz], w.repeat(n_contrasts)))
}

/// `1 - SSIM` between the packed reconstruction and reference, added to `g`.
fn ssim_loss(g: &mut Graph, z: Var, reference: &[Vec<num_complex::Complex64>], ny: usize, nz: usize) -> Result<Var> {
    let zp = g.pack(z)?;
    let r = g.constant(images_to_array(reference, ny, nz));
    let rp = g.pack(r)?;
    let s = g.ssim(zp, rp)?;
    Ok(g.scale(s, -1.0))
}

fn loss_value(g: &Graph, neg_ssim: Var) -> f64 {
    1.0 + g.value(neg_ssim).re()[0]
}

/// Mean `1 - SSIM` over `slices` with fixed masks.
pub fn evaluate_loss(params: &ParamStore, net: &NetConfig, n_echoes: usize, slices: &[Slice], masks: &[Vec<f64>], fusion: bool) -> Result<f64> {
    if slices.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for s in slices {
        let (ny, nz) = (s.data.coils.ny, s.data.coils.nz);
        let mut g = Graph::new();
        let b = params.bind(&mut g, &|_| true);
        let u = g.constant(masks_to_array(masks, ny, nz));
        let z = admm_unrolled(&mut g, &b, net, n_echoes, &s.data, u, fusion)?;
        let l = ssim_loss(&mut g, z, &s.reference, ny, nz)?;
        total += loss_value(&g, l);
    }
    Ok(total / slices.len() as f64)
}

/// One optimizer step on one slice. `masks = None` draws a fresh mask from
/// the current weights; otherwise the given masks are used.
fn train_step(
    store: &mut ParamStore,
    adam: &mut AdamState,
    cfg: &TrainConfig,
    net: &NetConfig,
    n_echoes: usize,
    slice: &Slice,
    spec: &MaskSpec,
    masks: Option<&Array>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let (ny, nz) = (slice.data.coils.ny, slice.data.coils.nz);
    let learn_mask = masks.is_none() && cfg.mask_opt;
    let mut g = Graph::new();
    let b = store.bind(&mut g, &|n| (n == MASK_WEIGHTS && !learn_mask) || n == FIXED_MASKS);
    let u = match masks {
        Some(m) => g.constant(m.clone()),
        None => {
            let w = b.var(MASK_WEIGHTS);
            let op = MaskDrawOp::new(g.value(w), spec, rng);
            g.custom(Box::new(op), &[w])?
        }
    };
    let z = admm_unrolled(&mut g, &b, net, n_echoes, &slice.data, u, cfg.fusion)?;
    let l = ssim_loss(&mut g, z, &slice.reference, ny, nz)?;
    let loss = loss_value(&g, l);
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss on slice {} of phantom {}", slice.index, slice.phantom_seed)));
    }
    let mut grads = g.backward(l)?;
    let gmap: BTreeMap<String, Vec<f64>> = b.collect(&mut grads);
    adam.step(store, &gmap)?;
    Ok(loss)
}

fn epoch_order(n: usize, seed: u64, phase: u8, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((phase as u64) << 56) ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    idx.shuffle(&mut rng);
    idx
}

/// Phase 1: joint optimization with a fresh mask draw per step.
pub fn train_phase1(data: &Dataset, cfg: &TrainConfig, net: &NetConfig) -> Result<Checkpoint> {
    train_phase1_with(data, cfg, net, |_| {})
}

/// [`train_phase1`] with a progress callback invoked after every epoch.
pub fn train_phase1_with(data: &Dataset, cfg: &TrainConfig, net: &NetConfig, mut progress: impl FnMut(&LossRecord)) -> Result<Checkpoint> {
    cfg.validate()?;
    net.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let nc = data.n_echoes + 3;
    let (ny, nz) = (data.ny, data.nz);
    let spec = cfg.mask_spec(ny, nz);
    let mut store = init_params(net, nc, cfg.seed);
    store.insert(MASK_WEIGHTS, initial_mask_weights(cfg, nc, ny, nz)?, "mask_weights");
    let mut adam = AdamState::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d61_736b);
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs_phase1 {
        for i in epoch_order(data.train.len(), cfg.seed, 1, epoch) {
            let loss = train_step(&mut store, &mut adam, cfg, net, data.n_echoes, &data.train[i], &spec, None, &mut rng)?;
            history.push(LossRecord { epoch, step, loss, val_loss: None });
            step += 1;
        }
        let w = store.get(MASK_WEIGHTS).expect("mask weights");
        let val_masks = draw_from_weights(w, &spec, validation_seed(cfg.seed));
        let val = evaluate_loss(&store, net, data.n_echoes, &data.val, &val_masks, cfg.fusion)?;
        let last = history.last_mut().expect("nonempty epoch");
        last.val_loss = Some(val);
        progress(last);
    }
    Ok(Checkpoint { phase: 1, params: store, adam, epoch: cfg.epochs_phase1, history, train: cfg.clone(), net: net.clone(), n_echoes: data.n_echoes })
}

/// Phase 2: binary masks drawn once from the final probabilities, network
/// fine-tuned with the masks fixed.
pub fn train_phase2(data: &Dataset, phase1: &Checkpoint) -> Result<Checkpoint> {
    train_phase2_with(data, phase1, |_| {})
}

pub fn train_phase2_with(data: &Dataset, phase1: &Checkpoint, mut progress: impl FnMut(&LossRecord)) -> Result<Checkpoint> {
    if phase1.phase != 1 {
        return Err(Error::Missing(format!("phase-1 checkpoint expected, got phase {}", phase1.phase)));
    }
    let cfg = &phase1.train;
    let net = &phase1.net;
    if phase1.n_echoes != data.n_echoes {
        return Err(Error::Dims(format!("checkpoint for {} echoes, dataset has {}", phase1.n_echoes, data.n_echoes)));
    }
    let (ny, nz) = (data.ny, data.nz);
    let spec = cfg.mask_spec(ny, nz);
    let mut store = phase1.params.clone();
    let w = store.get(MASK_WEIGHTS).ok_or_else(|| Error::Missing("phase-1 mask weights".into()))?;
    let masks = draw_from_weights(w, &spec, validation_seed(cfg.seed));
    let u = masks_to_array(&masks, ny, nz);
    store.insert(FIXED_MASKS, u.clone(), "fixed_masks");
    let mut adam = AdamState::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7068_3220);
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs_phase2 {
        for i in epoch_order(data.train.len(), cfg.seed, 2, epoch) {
            let loss = train_step(&mut store, &mut adam, cfg, net, data.n_echoes, &data.train[i], &spec, Some(&u), &mut rng)?;
            history.push(LossRecord { epoch, step, loss, val_loss: None });
            step += 1;
        }
        let val = evaluate_loss(&store, net, data.n_echoes, &data.val, &masks, cfg.fusion)?;
        let last = history.last_mut().expect("nonempty epoch");
        last.val_loss = Some(val);
        progress(last);
    }
    Ok(Checkpoint { phase: 2, params: store, adam, epoch: cfg.epochs_phase2, history, train: cfg.clone(), net: net.clone(), n_echoes: data.n_echoes })
}

pub fn write_history_csv(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.to_string()))?;
    for r in history {
        w.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Reconstructs every slice with the checkpoint's inference masks.
pub fn reconstruct_all(ckpt: &Checkpoint, slices: &[Slice]) -> Result<Vec<Vec<Vec<num_complex::Complex64>>>> {
    let Some(first) = slices.first() else { return Ok(Vec::new()) };
    let masks = ckpt.inference_masks(first.data.coils.ny, first.data.coils.nz)?;
    slices.iter().map(|s| reconstruct_slice(&ckpt.params, &ckpt.net, ckpt.n_echoes, &s.data, &masks, ckpt.train.fusion)).collect()
}

/// Mean channel-wise SSIM of reconstructions against the slice references.
pub fn mean_ssim(recons: &[Vec<Vec<num_complex::Complex64>>], slices: &[Slice]) -> Result<f64> {
    let mut total = 0.0;
    for (x, s) in recons.iter().zip(slices) {
        let (ny, nz) = (s.data.coils.ny, s.data.coils.nz);
        total += packed_ssim(x, &s.reference, ny, nz)?;
    }
    Ok(total / recons.len().max(1) as f64)
}

/// Channel-wise SSIM over real and imaginary planes of every contrast.
pub fn packed_ssim(x: &[Vec<num_complex::Complex64>], y: &[Vec<num_complex::Complex64>], ny: usize, nz: usize) -> Result<f64> {
    let split = |v: &[Vec<num_complex::Complex64>]| -> Vec<Vec<f64>> {
        v.iter().flat_map(|c| [c.iter().map(|z| z.re).collect(), c.iter().map(|z| z.im).collect()]).collect()
    };
    Ok(mcmap_core::metrics::ssim_eval(&split(x), &split(y), ny, nz)?)
}

/// Zero-filled baseline reconstructions with the given masks.
pub fn zero_filled_all(slices: &[Slice], masks: &[Vec<f64>]) -> Result<Vec<Vec<Vec<num_complex::Complex64>>>> {
    slices.iter().map(|s| zero_filled(&s.data, masks)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub test_ssim: f64,
    pub t1_blurriness: f64,
}

/// Outcome of one ablation variant.
#[derive(Debug, Clone)]
pub struct VariantResult {
    pub phase1: Checkpoint,
    pub phase2: Checkpoint,
    pub recons: Vec<Vec<Vec<num_complex::Complex64>>>,
    pub row: AblationRow,
}

/// Trains the four flag combinations with a shared seed and scores each on
/// the test split; `t1_blurriness` maps test reconstructions to a blurriness
/// score of the T1 map.
pub fn run_ablation(
    data: &Dataset,
    base: &TrainConfig,
    net: &NetConfig,
    mut t1_blurriness: impl FnMut(&[Vec<Vec<num_complex::Complex64>>]) -> Result<f64>,
) -> Result<Vec<VariantResult>> {
    VARIANTS
        .iter()
        .map(|label| {
            let cfg = base.with_variant(label)?;
            let p1 = train_phase1(data, &cfg, net)?;
            let p2 = train_phase2(data, &p1)?;
            let recons = reconstruct_all(&p2, &data.test)?;
            let test_ssim = mean_ssim(&recons, &data.test)?;
            let t1_blurriness = t1_blurriness(&recons)?;
            Ok(VariantResult { phase1: p1, phase2: p2, recons, row: AblationRow { variant: label.to_string(), test_ssim, t1_blurriness } })
        })
        .collect()
}
