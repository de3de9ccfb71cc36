//! The seven stages and the artifact flow between their directories.
//!
//! ```text
//! phantom/{vol}/        labels, brain_mask, chi, coils
//! simulate/{vol}/       images (noiseless), kspace (noisy, multi-coil)
//! train/{variant}/      phase1, phase2, history_phase{1,2}.csv, masks, probabilities, schedule.json
//! reconstruct/{src}/    test{i}: contrast images of every test phantom
//! map/dictionary/       dictionary atoms and (T1, T2) pairs
//! map/{src}/test{i}/    t1, t2, t2s, chi and their validity masks
//! evaluate/             ablation.csv, blurriness.csv, bland_altman_*.csv, summary.json
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use mcmap_core::io;
use mcmap_core::mapping::{derive_all_maps, reference_to_mean, FieldGeometry, QuantMaps};
use mcmap_core::metrics::{bland_altman, blurriness};
use mcmap_core::phantom::{make_phantom, CoilSet, PhantomSpec, TissueClass, TissuePhantom};
use mcmap_core::sampling::{elliptical_support, schedule_undersampled, AcquisitionSchedule};
use mcmap_core::seqsim::{build_dictionary, ContrastImageSet, Dictionary};
use mcmap_core::Dims3;
use mcmap_recon::admm::{reconstruct_slice, SliceData};
use mcmap_recon::blocks::{acquire, blocks_to_contrasts};
use mcmap_recon::dataset::{coil_set, phantom_seed, simulate_volume, spaced_subset, Dataset, Slice, Split};
use mcmap_recon::forward::Coils;
use mcmap_recon::training::{
    packed_ssim, train_phase1_with, train_phase2_with, write_history_csv, AblationRow, Checkpoint, LossRecord, MASK_WEIGHTS,
};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::artifacts::{is_complete, require, reset, seal, stamp_json, write_json};
use crate::config::{check_variants, content_hash, ExperimentConfig, StageKeys, FULL, TRUTH};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Phantom,
    Simulate,
    Train,
    Reconstruct,
    Map,
    Evaluate,
    All,
}

impl Stage {
    pub const CHAIN: [Stage; 6] = [Stage::Phantom, Stage::Simulate, Stage::Train, Stage::Reconstruct, Stage::Map, Stage::Evaluate];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Phantom => "phantom",
            Stage::Simulate => "simulate",
            Stage::Train => "train",
            Stage::Reconstruct => "reconstruct",
            Stage::Map => "map",
            Stage::Evaluate => "evaluate",
            Stage::All => "all",
        }
    }
}

/// One simulated phantom of the train, validation or test split.
#[derive(Debug, Clone)]
pub struct Volume {
    pub name: String,
    pub split: Split,
    pub spec: PhantomSpec,
}

pub fn volumes(cfg: &ExperimentConfig) -> Vec<Volume> {
    let d = &cfg.data;
    let make = |prefix: &str, split, i| Volume {
        name: format!("{prefix}{i}"),
        split,
        spec: PhantomSpec { seed: phantom_seed(cfg.seed, split, i), ..cfg.phantom.clone() },
    };
    let mut out: Vec<Volume> = (0..d.train_phantoms).map(|i| make("train", Split::Train, i)).collect();
    if d.val_slices > 0 {
        out.push(make("val", Split::Val, 0));
    }
    out.extend((0..d.test_phantoms).map(|i| make("test", Split::Test, i)));
    out
}

/// Contrast labels in storage order.
pub fn contrast_names(n_echoes: usize) -> Vec<String> {
    let mut v: Vec<String> = (1..=n_echoes).map(|i| format!("echo{i}")).collect();
    v.extend(["ir1", "ir2", "t2prep"].map(String::from));
    v
}

/// Map names as used in file names and evaluation tables.
pub const MAPS: [&str; 4] = ["t1", "t2", "t2s", "qsm"];

fn map_units(name: &str) -> &'static str {
    if name == "qsm" || name == "chi" {
        "ppm"
    } else {
        "ms"
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlandAltmanRow {
    pub comparison: String,
    pub region: String,
    pub a: f64,
    pub b: f64,
    pub mean: f64,
    pub difference: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlurrinessRow {
    pub source: String,
    pub map: String,
    pub score: f64,
}

/// Agreement of one comparison; `roi_mean` is the mean of the first
/// (reference) member over the paired ROIs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementSummary {
    pub bias: f64,
    pub sd: f64,
    pub loa_low: f64,
    pub loa_high: f64,
    pub n: usize,
    pub roi_mean: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub stage: String,
    pub config_hash: String,
    pub variants: Vec<String>,
    pub ablation: Vec<AblationRow>,
    /// source -> map -> mean slice score.
    pub blurriness: BTreeMap<String, BTreeMap<String, f64>>,
    /// map -> comparison -> agreement.
    pub bland_altman: BTreeMap<String, BTreeMap<String, AgreementSummary>>,
}

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub keys: StageKeys,
    pub out: PathBuf,
    pub variants: Vec<String>,
    pub threads: usize,
    pub verbose: bool,
}

impl Pipeline {
    /// Validates everything up front so a bad config writes nothing.
    pub fn new(cfg: ExperimentConfig, out: PathBuf, variants: Vec<String>, threads: usize) -> Result<Self> {
        cfg.validate()?;
        check_variants(&variants)?;
        for v in &variants {
            cfg.train_config(v)?;
        }
        if threads == 0 {
            return Err(Error::Validation("--threads must be >= 1".into()));
        }
        let keys = StageKeys::new(&cfg);
        Ok(Self { cfg, keys, out, variants, threads, verbose: true })
    }

    pub fn run(&self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Phantom => self.phantom(),
            Stage::Simulate => self.simulate(),
            Stage::Train => self.train(),
            Stage::Reconstruct => self.reconstruct(),
            Stage::Map => self.map(),
            Stage::Evaluate => self.evaluate().map(|_| ()),
            Stage::All => Stage::CHAIN.iter().try_for_each(|&s| self.run(s)),
        }
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.out.join(stage)
    }

    fn sources(&self) -> Vec<String> {
        std::iter::once(FULL.to_string()).chain(self.variants.iter().cloned()).collect()
    }

    fn test_volumes(&self) -> Vec<Volume> {
        volumes(&self.cfg).into_iter().filter(|v| v.split == Split::Test).collect()
    }

    fn dims(&self) -> Dims3 {
        self.cfg.phantom.dims
    }

    // ---------------------------------------------------------------- phantom

    fn phantom(&self) -> Result<()> {
        let dir = self.stage_dir("phantom");
        let hash = &self.keys.phantom;
        if is_complete(&dir, hash) {
            self.log("phantom: cached");
            return Ok(());
        }
        reset(&dir)?;
        let d = self.dims();
        let shape = d.as_array();
        for vol in volumes(&self.cfg) {
            let p = make_phantom(&vol.spec)?;
            let coils = coil_set(&vol.spec, self.cfg.data.n_coils)?;
            let base = dir.join(&vol.name);
            let meta = json!({
                "split": vol.split,
                "seed": p.seed,
                "voxel_size": p.voxel_size,
                "b0_dir": p.b0_dir,
                "field_scale_hz_per_ppm": p.field_scale_hz_per_ppm,
                "classes": p.classes,
            });
            io::write_u8(&base.join("labels"), &p.labels, &shape, "phantom", hash, meta)?;
            let mask: Vec<u8> = p.brain_mask.iter().map(|&b| b as u8).collect();
            io::write_u8(&base.join("brain_mask"), &mask, &shape, "phantom", hash, Value::Null)?;
            io::write_f32(&base.join("chi"), &p.chi_map(), &shape, "phantom", hash, json!({ "units": "ppm" }))?;
            let maps: Vec<Complex64> = coils.maps.concat();
            let cshape = [coils.n_coils(), d.nx, d.ny, d.nz];
            io::write_c64(&base.join("coils"), &maps, &cshape, "phantom", hash, json!({ "normalization": "rss" }))?;
            self.log(format!("phantom: {} written", vol.name));
        }
        seal(&dir, "phantom", hash)
    }

    fn load_phantom(&self, vol: &Volume) -> Result<TissuePhantom> {
        let base = self.stage_dir("phantom").join(&vol.name);
        let (labels, sc) = io::read_u8(&base.join("labels"))?;
        let (mask, _) = io::read_u8(&base.join("brain_mask"))?;
        let (chi, _) = io::read_f32(&base.join("chi"))?;
        let m = &sc.meta;
        let field = |k: &str| m.get(k).cloned().ok_or_else(|| Error::Io(format!("phantom sidecar lacks {k}")));
        let classes: Vec<TissueClass> = serde_json::from_value(field("classes")?)?;
        let mut p = TissuePhantom {
            dims: self.dims(),
            voxel_size: serde_json::from_value(field("voxel_size")?)?,
            b0_dir: serde_json::from_value(field("b0_dir")?)?,
            seed: serde_json::from_value(field("seed")?)?,
            field_scale_hz_per_ppm: serde_json::from_value(field("field_scale_hz_per_ppm")?)?,
            classes,
            labels,
            brain_mask: mask.iter().map(|&v| v != 0).collect(),
            exterior_chi: Vec::new(),
        };
        let tissue = p.tissue_map(|t| t.chi_ppm);
        p.exterior_chi = chi.iter().zip(&tissue).map(|(a, b)| a - b).collect();
        Ok(p)
    }

    fn load_coils(&self, vol: &Volume) -> Result<CoilSet> {
        let (v, sc) = io::read_c64(&self.stage_dir("phantom").join(&vol.name).join("coils"))?;
        let d = self.dims();
        if sc.shape.len() != 4 || sc.shape[1..] != d.as_array() {
            return Err(Error::Io(format!("coil array shape {:?} does not match the phantom", sc.shape)));
        }
        Ok(CoilSet { dims: d, maps: v.chunks(d.len()).map(|c| c.to_vec()).collect() })
    }

    // --------------------------------------------------------------- simulate

    fn simulate(&self) -> Result<()> {
        require(&self.stage_dir("phantom"), &self.keys.phantom, "phantom")?;
        let dir = self.stage_dir("simulate");
        let hash = &self.keys.simulate;
        if is_complete(&dir, hash) {
            self.log("simulate: cached");
            return Ok(());
        }
        reset(&dir)?;
        let d = self.dims();
        let ne = self.cfg.n_echoes();
        let names = contrast_names(ne);
        for vol in volumes(&self.cfg) {
            let v = simulate_volume(&vol.spec, &self.cfg.sequence, &self.cfg.data)?;
            let base = dir.join(&vol.name);
            let nc_img = v.images.n_contrasts();
            io::write_c64(
                &base.join("images"),
                &v.images.data.concat(),
                &[nc_img, d.nx, d.ny, d.nz],
                "simulate",
                hash,
                json!({ "contrasts": names, "noise": "none" }),
            )?;
            let ncoil = self.cfg.data.n_coils;
            let plane = d.slice_len();
            let mut k = vec![Complex64::new(0.0, 0.0); nc_img * ncoil * d.len()];
            for s in &v.slices {
                for (j, per) in s.data.kspace.iter().enumerate() {
                    for (c, kc) in per.iter().enumerate() {
                        let off = ((j * ncoil + c) * d.nx + s.index) * plane;
                        for (dst, src) in k[off..off + plane].iter_mut().zip(kc) {
                            *dst = src * s.norm;
                        }
                    }
                }
            }
            let norms: Vec<f64> = v.slices.iter().map(|s| s.norm).collect();
            io::write_c64(
                &base.join("kspace"),
                &k,
                &[nc_img, ncoil, d.nx, d.ny, d.nz],
                "simulate",
                hash,
                json!({ "contrasts": names, "noise_rel": self.cfg.data.noise_rel, "norms": norms, "layout": "centered fft over (y, z) per x slice" }),
            )?;
            self.log(format!("simulate: {} written", vol.name));
        }
        seal(&dir, "simulate", hash)
    }

    /// Normalized slices of one volume, read back from disk.
    fn load_slices(&self, vol: &Volume) -> Result<Vec<Slice>> {
        let coils = self.load_coils(vol)?;
        let (k, sc) = io::read_c64(&self.stage_dir("simulate").join(&vol.name).join("kspace"))?;
        let norms: Vec<f64> = serde_json::from_value(sc.meta.get("norms").cloned().unwrap_or(Value::Null))?;
        let d = self.dims();
        let (nct, nc) = (self.cfg.sequence.n_contrasts(), coils.n_coils());
        if sc.shape != [nct, nc, d.nx, d.ny, d.nz] || norms.len() != d.nx {
            return Err(Error::Io(format!("k-space shape {:?} does not match the config", sc.shape)));
        }
        let plane = d.slice_len();
        (0..d.nx)
            .map(|ix| {
                let c = Rc::new(Coils::from_set(&coils.slice(ix))?);
                let inv = 1.0 / norms[ix];
                let kspace: Vec<Vec<Vec<Complex64>>> = (0..nct)
                    .map(|j| {
                        (0..nc)
                            .map(|ci| {
                                let off = ((j * nc + ci) * d.nx + ix) * plane;
                                k[off..off + plane].iter().map(|v| v * inv).collect()
                            })
                            .collect()
                    })
                    .collect();
                let reference = kspace.iter().map(|kj| c.decode(kj)).collect();
                Ok(Slice {
                    data: SliceData { coils: c, kspace: Rc::new(kspace) },
                    reference,
                    norm: norms[ix],
                    phantom_seed: vol.spec.seed,
                    index: ix,
                })
            })
            .collect()
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let mut train = Vec::new();
        let mut val = Vec::new();
        let mut test = Vec::new();
        for vol in volumes(&self.cfg) {
            let slices = self.load_slices(&vol)?;
            match vol.split {
                Split::Train => train.extend(slices),
                Split::Val => val = spaced_subset(&slices, self.cfg.data.val_slices),
                Split::Test => test.extend(slices),
            }
        }
        let d = self.dims();
        Ok(Dataset { n_echoes: self.cfg.n_echoes(), ny: d.ny, nz: d.nz, train, val, test })
    }

    // ------------------------------------------------------------------ train

    fn train(&self) -> Result<()> {
        require(&self.stage_dir("simulate"), &self.keys.simulate, "simulate")?;
        let mut todo = Vec::new();
        for v in &self.variants {
            if is_complete(&self.stage_dir("train").join(v), &self.keys.train(&self.cfg, v)?) {
                self.log(format!("train {v}: cached"));
            } else {
                todo.push(v.clone());
            }
        }
        if todo.is_empty() {
            return Ok(());
        }
        let workers = self.threads.min(todo.len());
        if workers <= 1 {
            let data = self.load_dataset()?;
            return todo.iter().try_for_each(|v| self.train_variant(&data, v));
        }
        // each worker owns its dataset; variants are independent and seeded alike
        let chunks: Vec<Vec<String>> = (0..workers).map(|w| todo.iter().skip(w).step_by(workers).cloned().collect()).collect();
        std::thread::scope(|s| {
            let handles: Vec<_> = chunks
                .iter()
                .map(|chunk| {
                    s.spawn(move || -> Result<()> {
                        let data = self.load_dataset()?;
                        chunk.iter().try_for_each(|v| self.train_variant(&data, v))
                    })
                })
                .collect();
            handles.into_iter().try_for_each(|h| h.join().map_err(|_| Error::Runtime("training worker panicked".into()))?)
        })
    }

    fn train_variant(&self, data: &Dataset, v: &str) -> Result<()> {
        let dir = self.stage_dir("train").join(v);
        let hash = self.keys.train(&self.cfg, v)?;
        reset(&dir)?;
        let cfg = self.cfg.train_config(v)?;
        let report = |phase: u8, total: usize| {
            move |r: &LossRecord| {
                self.log(format!(
                    "train {v} phase {phase} epoch {}/{total}: loss {:.5}, val {:.5}",
                    r.epoch + 1,
                    r.loss,
                    r.val_loss.unwrap_or(f64::NAN)
                ))
            }
        };
        let p1 = train_phase1_with(data, &cfg, &self.cfg.network, report(1, cfg.epochs_phase1))?;
        p1.save(&dir.join("phase1"))?;
        stamp_json(&dir.join("phase1.json"), "train", &hash)?;
        write_history_csv(&dir.join("history_phase1.csv"), &p1.history)?;
        let p2 = train_phase2_with(data, &p1, report(2, cfg.epochs_phase2))?;
        p2.save(&dir.join("phase2"))?;
        stamp_json(&dir.join("phase2.json"), "train", &hash)?;
        write_history_csv(&dir.join("history_phase2.csv"), &p2.history)?;

        let (ny, nz) = (data.ny, data.nz);
        let nct = data.n_echoes + 3;
        let masks = p2.inference_masks(ny, nz)?;
        let m8: Vec<u8> = masks.iter().flatten().map(|&u| (u > 0.5) as u8).collect();
        let names = contrast_names(data.n_echoes);
        io::write_u8(&dir.join("masks"), &m8, &[nct, ny, nz], "train", &hash, json!({ "contrasts": names }))?;
        let w = p2.params.get(MASK_WEIGHTS).ok_or_else(|| Error::Runtime("checkpoint lacks mask weights".into()))?;
        let spec = cfg.mask_spec(ny, nz);
        let probs: Vec<f64> = w.re().chunks(ny * nz).flat_map(|wj| spec.probabilities(wj).p).collect();
        io::write_f32(&dir.join("probabilities"), &probs, &[nct, ny, nz], "train", &hash, json!({ "contrasts": names, "target_ratio": 1.0 / cfg.r }))?;
        let schedule = self.schedule(&masks)?;
        write_json(&dir.join("schedule.json"), &schedule)?;
        stamp_json(&dir.join("schedule.json"), "train", &hash)?;
        seal(&dir, "train", &hash)
    }

    /// Fan-beam schedule realizing `masks` with as few repetitions as fit.
    pub fn schedule(&self, masks: &[Vec<f64>]) -> Result<AcquisitionSchedule> {
        let d = self.dims();
        let ne = self.cfg.n_echoes();
        let bin: Vec<Vec<bool>> = masks.iter().map(|m| m.iter().map(|&u| u > 0.5).collect()).collect();
        let echo_union = (0..d.slice_len()).filter(|&i| bin[..ne].iter().any(|m| m[i])).count();
        let busiest = bin[ne..].iter().map(|m| m.iter().filter(|&&b| b).count()).chain([echo_union]).max().unwrap_or(0);
        let trs = self.cfg.sequence.trs_per_segment;
        let n_rep = busiest.div_ceil(trs).max(1);
        Ok(schedule_undersampled(&bin, ne, &elliptical_support(d.ny, d.nz), n_rep, &self.cfg.sequence.layout())?)
    }

    // ------------------------------------------------------------ reconstruct

    fn reconstruct(&self) -> Result<()> {
        for src in self.sources() {
            let hash = self.keys.reconstruct(&self.cfg, &src)?;
            let dir = self.stage_dir("reconstruct").join(&src);
            if is_complete(&dir, &hash) {
                self.log(format!("reconstruct {src}: cached"));
                continue;
            }
            require(&self.stage_dir("simulate"), &self.keys.simulate, "simulate")?;
            let trained = if src == FULL {
                None
            } else {
                let tdir = self.stage_dir("train").join(&src);
                require(&tdir, &self.keys.train(&self.cfg, &src)?, "train")?;
                let ckpt = Checkpoint::load(&tdir.join("phase2"))?;
                let schedule: AcquisitionSchedule = crate::artifacts::read_json(&tdir.join("schedule.json"))?;
                Some((ckpt, schedule))
            };
            reset(&dir)?;
            let d = self.dims();
            let nct = self.cfg.sequence.n_contrasts();
            for vol in self.test_volumes() {
                let slices = self.load_slices(&vol)?;
                let mut vol_img = vec![Vec::with_capacity(d.len()); nct];
                for s in &slices {
                    let x = match &trained {
                        None => s.reference.clone(),
                        Some((ckpt, schedule)) => {
                            let nc = s.data.coils.n_coils();
                            let lines = acquire(schedule, &s.data.kspace)?;
                            let (y, u) = blocks_to_contrasts(schedule, &lines, nc)?;
                            if u != ckpt.inference_masks(d.ny, d.nz)? {
                                return Err(Error::Runtime(format!("schedule of {src} does not realize its trained masks")));
                            }
                            let data = SliceData { coils: s.data.coils.clone(), kspace: Rc::new(y) };
                            reconstruct_slice(&ckpt.params, &ckpt.net, ckpt.n_echoes, &data, &u, ckpt.train.fusion)?
                        }
                    };
                    for (acc, xj) in vol_img.iter_mut().zip(x) {
                        acc.extend(xj.into_iter().map(|v| v * s.norm));
                    }
                }
                let meta = json!({
                    "contrasts": contrast_names(self.cfg.n_echoes()),
                    "source": src,
                    "sampling": if src == FULL { "full".to_string() } else { format!("train/{src}/schedule.json") },
                });
                io::write_c64(&dir.join(&vol.name), &vol_img.concat(), &[nct, d.nx, d.ny, d.nz], "reconstruct", &hash, meta)?;
                self.log(format!("reconstruct {src}: {} written", vol.name));
            }
            seal(&dir, "reconstruct", &hash)?;
        }
        Ok(())
    }

    pub fn load_recon(&self, src: &str, vol: &Volume) -> Result<ContrastImageSet> {
        let (x, sc) = io::read_c64(&self.stage_dir("reconstruct").join(src).join(&vol.name))?;
        let d = self.dims();
        if sc.shape != [self.cfg.sequence.n_contrasts(), d.nx, d.ny, d.nz] {
            return Err(Error::Io(format!("reconstruction shape {:?} does not match the config", sc.shape)));
        }
        Ok(ContrastImageSet { dims: d, n_echoes: self.cfg.n_echoes(), data: x.chunks(d.len()).map(|c| c.to_vec()).collect() })
    }

    // -------------------------------------------------------------------- map

    fn dictionary(&self) -> Result<Dictionary> {
        let m = &self.cfg.mapping;
        let dict = build_dictionary(&self.cfg.sequence, &m.t1_grid()?, &m.t2_grid()?)?;
        let dir = self.stage_dir("map").join("dictionary");
        let hash = content_hash(&("dictionary", &self.cfg.sequence, m));
        if !is_complete(&dir, &hash) {
            reset(&dir)?;
            let atoms: Vec<f64> = dict.atoms.iter().flatten().copied().collect();
            let pairs: Vec<f64> = dict.pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
            let n = dict.atoms.len();
            let meta = json!({
                "t1_grid_ms": m.t1_grid_ms,
                "t2_grid_ms": m.t2_grid_ms,
                "signal": ["ir1", "echo1", "ir2", "t2prep"],
                "normalization": "unit l2",
            });
            io::write_f32(&dir.join("atoms"), &atoms, &[n, 4], "map", &hash, meta)?;
            io::write_f32(&dir.join("pairs"), &pairs, &[n, 2], "map", &hash, json!({ "columns": ["t1_ms", "t2_ms"] }))?;
            seal(&dir, "map", &hash)?;
        }
        Ok(dict)
    }

    fn map(&self) -> Result<()> {
        let mut dict: Option<Dictionary> = None;
        let sources: Vec<String> = std::iter::once(TRUTH.to_string()).chain(self.sources()).collect();
        for src in sources {
            let hash = self.keys.map(&self.cfg, &src)?;
            let dir = self.stage_dir("map").join(&src);
            if is_complete(&dir, &hash) {
                self.log(format!("map {src}: cached"));
                continue;
            }
            if src == TRUTH {
                require(&self.stage_dir("phantom"), &self.keys.phantom, "phantom")?;
            } else {
                require(&self.stage_dir("reconstruct").join(&src), &self.keys.reconstruct(&self.cfg, &src)?, "reconstruct")?;
                if dict.is_none() {
                    dict = Some(self.dictionary()?);
                }
            }
            reset(&dir)?;
            for vol in self.test_volumes() {
                let p = self.load_phantom(&vol)?;
                let maps = if src == TRUTH {
                    truth_maps(&p)
                } else {
                    let images = self.load_recon(&src, &vol)?;
                    let geom = FieldGeometry { voxel_size: p.voxel_size, b0_dir: p.b0_dir, scale_hz_per_ppm: p.field_scale_hz_per_ppm };
                    let dict = dict.as_ref().expect("dictionary built");
                    derive_all_maps(&images, &p.brain_mask, &self.cfg.sequence, dict, &geom, &self.cfg.mapping.qsm())?
                };
                self.write_maps(&dir.join(&vol.name), &maps, &hash)?;
                self.log(format!("map {src}: {} written", vol.name));
            }
            seal(&dir, "map", &hash)?;
        }
        Ok(())
    }

    fn write_maps(&self, base: &Path, maps: &QuantMaps, hash: &str) -> Result<()> {
        let shape = maps.dims.as_array();
        let m = &self.cfg.mapping;
        let settings = json!({
            "t1_grid_ms": m.t1_grid_ms,
            "t2_grid_ms": m.t2_grid_ms,
            "tkd_threshold": m.tkd_threshold,
            "pdf_iterations": m.pdf_iterations,
        });
        for (name, values) in [("t1", &maps.t1), ("t2", &maps.t2), ("t2s", &maps.t2s), ("chi", &maps.chi)] {
            let meta = json!({ "units": map_units(name), "settings": settings });
            io::write_f32(&base.join(name), values, &shape, "map", hash, meta)?;
        }
        for (name, valid) in [("valid_t1t2", &maps.valid_t1t2), ("valid_t2s", &maps.valid_t2s), ("valid_chi", &maps.valid_chi)] {
            let v: Vec<u8> = valid.iter().map(|&b| b as u8).collect();
            io::write_u8(&base.join(name), &v, &shape, "map", hash, Value::Null)?;
        }
        Ok(())
    }

    pub fn load_maps(&self, src: &str, vol: &Volume) -> Result<QuantMaps> {
        let base = self.stage_dir("map").join(src).join(&vol.name);
        let f = |n: &str| io::read_f32(&base.join(n)).map(|r| r.0);
        let b = |n: &str| io::read_u8(&base.join(n)).map(|r| r.0.iter().map(|&v| v != 0).collect::<Vec<bool>>());
        Ok(QuantMaps {
            dims: self.dims(),
            t1: f("t1")?,
            t2: f("t2")?,
            t2s: f("t2s")?,
            chi: f("chi")?,
            valid_t1t2: b("valid_t1t2")?,
            valid_t2s: b("valid_t2s")?,
            valid_chi: b("valid_chi")?,
        })
    }

    // --------------------------------------------------------------- evaluate

    pub fn evaluate_hash(&self) -> Result<String> {
        let mut parts = Vec::new();
        for src in std::iter::once(TRUTH.to_string()).chain(self.sources()) {
            parts.push(self.keys.map(&self.cfg, &src)?);
        }
        for src in self.sources() {
            parts.push(self.keys.reconstruct(&self.cfg, &src)?);
        }
        Ok(content_hash(&("evaluate", parts, &self.variants)))
    }

    /// Writes the evaluation tables and returns the summary.
    pub fn evaluate(&self) -> Result<EvaluationSummary> {
        let dir = self.stage_dir("evaluate");
        let hash = self.evaluate_hash()?;
        if is_complete(&dir, &hash) {
            self.log("evaluate: cached");
            return crate::artifacts::read_json(&dir.join("summary.json"));
        }
        let all_sources: Vec<String> = std::iter::once(TRUTH.to_string()).chain(self.sources()).collect();
        for src in &all_sources {
            require(&self.stage_dir("map").join(src), &self.keys.map(&self.cfg, src)?, "map")?;
        }
        for src in self.sources() {
            require(&self.stage_dir("reconstruct").join(&src), &self.keys.reconstruct(&self.cfg, &src)?, "reconstruct")?;
        }
        let tests = self.test_volumes();
        let d = self.dims();
        let phantoms = tests.iter().map(|v| self.load_phantom(v)).collect::<Result<Vec<_>>>()?;
        let mut maps: BTreeMap<String, Vec<QuantMaps>> = BTreeMap::new();
        for src in &all_sources {
            maps.insert(src.clone(), tests.iter().map(|v| self.load_maps(src, v)).collect::<Result<_>>()?);
        }

        let mut ablation = Vec::new();
        let full: Vec<ContrastImageSet> = tests.iter().map(|v| self.load_recon(FULL, v)).collect::<Result<_>>()?;
        for v in &self.variants {
            let mut total = 0.0;
            let mut n = 0;
            for (vol, reference) in tests.iter().zip(&full) {
                let x = self.load_recon(v, vol)?;
                for ix in 0..d.nx {
                    total += packed_ssim(&x.slice(ix).data, &reference.slice(ix).data, d.ny, d.nz)?;
                    n += 1;
                }
            }
            let t1_blurriness = mean_blurriness(&maps[v], "t1")?;
            ablation.push(AblationRow { variant: v.clone(), test_ssim: total / n as f64, t1_blurriness });
        }
        reset(&dir)?;
        let mut w = csv::Writer::from_path(dir.join("ablation.csv"))?;
        ablation.iter().try_for_each(|r| w.serialize(r))?;
        w.flush()?;

        let mut blur: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        let mut w = csv::Writer::from_path(dir.join("blurriness.csv"))?;
        for src in &all_sources {
            for m in MAPS {
                let score = mean_blurriness(&maps[src], m)?;
                w.serialize(BlurrinessRow { source: src.clone(), map: m.into(), score })?;
                blur.entry(src.clone()).or_default().insert(m.into(), score);
            }
        }
        w.flush()?;

        let mut comparisons: Vec<(String, String)> = self.variants.iter().map(|v| (FULL.to_string(), v.clone())).collect();
        comparisons.extend(self.sources().into_iter().map(|s| (TRUTH.to_string(), s)));
        let mut agreement: BTreeMap<String, BTreeMap<String, AgreementSummary>> = BTreeMap::new();
        for m in MAPS {
            let mut w = csv::Writer::from_path(dir.join(format!("bland_altman_{m}.csv")))?;
            for (a, b) in &comparisons {
                let label = format!("{a}_vs_{b}");
                let rows = roi_pairs(&label, &phantoms, &tests, &maps[a], &maps[b], m);
                rows.iter().try_for_each(|r| w.serialize(r))?;
                let xa: Vec<f64> = rows.iter().map(|r| r.a).collect();
                let xb: Vec<f64> = rows.iter().map(|r| r.b).collect();
                if let Ok(ba) = bland_altman(&xa, &xb) {
                    let roi_mean = xa.iter().sum::<f64>() / xa.len() as f64;
                    let s = AgreementSummary { bias: ba.bias, sd: ba.sd, loa_low: ba.loa_low, loa_high: ba.loa_high, n: ba.n, roi_mean };
                    agreement.entry(m.into()).or_default().insert(label, s);
                }
            }
            w.flush()?;
        }
        let summary = EvaluationSummary {
            stage: "evaluate".into(),
            config_hash: hash.clone(),
            variants: self.variants.clone(),
            ablation,
            blurriness: blur,
            bland_altman: agreement,
        };
        write_json(&dir.join("summary.json"), &summary)?;
        seal(&dir, "evaluate", &hash)?;
        self.log(format!("evaluate: written to {}", dir.display()));
        Ok(summary)
    }
}

/// Ground-truth maps from the phantom's class table; susceptibility is the
/// tissue part referenced to its brain-mask mean.
pub fn truth_maps(p: &TissuePhantom) -> QuantMaps {
    let inside = |v: Vec<f64>| -> Vec<f64> { v.into_iter().zip(&p.brain_mask).map(|(x, &m)| if m { x } else { 0.0 }).collect() };
    let mut chi = inside(p.tissue_map(|t| t.chi_ppm));
    reference_to_mean(&mut chi, &p.brain_mask);
    QuantMaps {
        dims: p.dims,
        t1: inside(p.tissue_map(|t| t.t1_ms)),
        t2: inside(p.tissue_map(|t| t.t2_ms)),
        t2s: inside(p.tissue_map(|t| t.t2s_ms)),
        chi,
        valid_t1t2: p.brain_mask.clone(),
        valid_t2s: p.brain_mask.clone(),
        valid_chi: p.brain_mask.clone(),
    }
}

fn select<'a>(maps: &'a QuantMaps, name: &str) -> (&'a [f64], &'a [bool]) {
    match name {
        "t1" => (&maps.t1, &maps.valid_t1t2),
        "t2" => (&maps.t2, &maps.valid_t1t2),
        "t2s" => (&maps.t2s, &maps.valid_t2s),
        _ => (&maps.chi, &maps.valid_chi),
    }
}

/// Mean blurriness over the slices of every volume that hold valid voxels.
pub fn mean_blurriness(maps: &[QuantMaps], name: &str) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for m in maps {
        let (values, valid) = select(m, name);
        let d = m.dims;
        for ix in 0..d.nx {
            let r = d.slice_range(ix);
            if valid[r.clone()].iter().any(|&v| v) {
                total += blurriness(&values[r], d.ny, d.nz)?;
                n += 1;
            }
        }
    }
    Ok(if n == 0 { 1.0 } else { total / n as f64 })
}

/// Per-ROI means of two map sources over voxels valid in both.
pub fn roi_pairs(label: &str, phantoms: &[TissuePhantom], vols: &[Volume], a: &[QuantMaps], b: &[QuantMaps], name: &str) -> Vec<BlandAltmanRow> {
    let mut rows = Vec::new();
    for ((p, vol), (ma, mb)) in phantoms.iter().zip(vols).zip(a.iter().zip(b)) {
        let (grid, regions) = p.regions();
        let (va, oka) = select(ma, name);
        let (vb, okb) = select(mb, name);
        for r in &regions {
            let idx: Vec<usize> = (0..grid.len()).filter(|&i| grid[i] == r.id && oka[i] && okb[i]).collect();
            if idx.is_empty() {
                continue;
            }
            let n = idx.len() as f64;
            let ma = idx.iter().map(|&i| va[i]).sum::<f64>() / n;
            let mb = idx.iter().map(|&i| vb[i]).sum::<f64>() / n;
            rows.push(BlandAltmanRow {
                comparison: label.into(),
                region: format!("{}/{}", vol.name, r.name),
                a: ma,
                b: mb,
                mean: (ma + mb) / 2.0,
                difference: ma - mb,
            });
        }
    }
    rows
}
