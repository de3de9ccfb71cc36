//! Steady-state longitudinal magnetization of the interleaved IR / T2prep,
//! single-echo / multi-echo gradient-echo sequence, contrast image synthesis,
//! multi-coil k-space synthesis and the T1/T2 matching dictionary.
//!
//! One repetition is modeled as a chain of affine maps on `Mz`
//! (`Mz -> a * Mz + b`); the steady state is the fixed point of their
//! composition. Each readout block is represented by the transverse
//! magnetization at the TR that acquires the k-space center.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::fft2c;
use crate::phantom::{CoilSet, TissueParams, TissuePhantom};
use crate::volume::Dims3;

/// Largest deviation of an echo spacing from the mean spacing that still
/// counts as equally spaced (echo times are specified to 0.1 ms).
pub const ECHO_SPACING_TOLERANCE_MS: f64 = 0.11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceParams {
    pub flip_deg: f64,
    pub tr_gre_ms: f64,
    pub tr_mgre_ms: f64,
    pub te_gre_ms: f64,
    pub te_mgre_ms: Vec<f64>,
    pub t2prep_te_ms: f64,
    pub trs_per_segment: usize,
    pub inversion_efficiency: f64,
    /// Delays after the inversion, after IR block 1, after the mGRE block and after IR block 2.
    pub delays_ms: [f64; 4],
}

impl Default for SequenceParams {
    fn default() -> Self {
        Self {
            flip_deg: 8.0,
            tr_gre_ms: 7.8,
            tr_mgre_ms: 41.6,
            te_gre_ms: 2.9,
            te_mgre_ms: vec![2.9, 7.7, 12.5, 17.4, 22.2, 27.0, 31.8, 36.7],
            t2prep_te_ms: 85.0,
            trs_per_segment: 128,
            inversion_efficiency: 1.0,
            delays_ms: [0.0; 4],
        }
    }
}

impl SequenceParams {
    /// Same timing with only the first `n` echoes of the multi-echo readout.
    pub fn with_echoes(mut self, n: usize) -> Self {
        self.te_mgre_ms.truncate(n);
        self
    }

    pub fn n_echoes(&self) -> usize {
        self.te_mgre_ms.len()
    }

    /// Number of contrasts: every echo plus the three single-echo images.
    pub fn n_contrasts(&self) -> usize {
        self.n_echoes() + 3
    }

    pub fn delta_te_ms(&self) -> f64 {
        let n = self.te_mgre_ms.len();
        (self.te_mgre_ms[n - 1] - self.te_mgre_ms[0]) / (n - 1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.flip_deg > 0.0 && self.flip_deg < 90.0) {
            return fail(format!("flip angle {} outside (0, 90)", self.flip_deg));
        }
        if self.te_mgre_ms.len() < 3 {
            return fail("at least 3 echoes are required".into());
        }
        let times = [self.tr_gre_ms, self.tr_mgre_ms, self.te_gre_ms, self.t2prep_te_ms];
        if times.iter().chain(&self.te_mgre_ms).any(|t| !(*t > 0.0)) {
            return fail("all times must be positive".into());
        }
        if self.delays_ms.iter().any(|d| !(*d >= 0.0)) {
            return fail("delays must be non-negative".into());
        }
        if self.trs_per_segment == 0 {
            return fail("trs_per_segment must be >= 1".into());
        }
        if !(self.inversion_efficiency > 0.0 && self.inversion_efficiency <= 1.0) {
            return fail("inversion efficiency must lie in (0, 1]".into());
        }
        let dte = self.delta_te_ms();
        for w in self.te_mgre_ms.windows(2) {
            if w[1] <= w[0] {
                return fail("echo times must be strictly increasing".into());
            }
            if (w[1] - w[0] - dte).abs() > ECHO_SPACING_TOLERANCE_MS {
                return fail("echo times must be equally spaced".into());
            }
        }
        if self.te_gre_ms >= self.tr_gre_ms || self.te_mgre_ms[self.n_echoes() - 1] >= self.tr_mgre_ms {
            return fail("echo times must fit inside their TR".into());
        }
        Ok(())
    }

    /// Event chain of one repetition: inversion, IR block 1 (in-and-out),
    /// multi-echo block (reverse-centric), IR block 2 (in-and-out), T2prep,
    /// T2-prepared block (centric).
    pub fn layout(&self) -> SequenceLayout {
        let n = self.trs_per_segment;
        let [td1, td2, td3, td4] = self.delays_ms;
        let ro = |kind, tr_ms, ordering| Event::Readout { kind, n_trs: n, tr_ms, ordering };
        let mut events = vec![Event::Inversion { efficiency: self.inversion_efficiency }];
        let push_delay = |events: &mut Vec<Event>, ms: f64| {
            if ms > 0.0 {
                events.push(Event::Delay { ms });
            }
        };
        push_delay(&mut events, td1);
        events.push(ro(BlockKind::InversionRecovery1, self.tr_gre_ms, ViewOrdering::InAndOut));
        push_delay(&mut events, td2);
        events.push(ro(BlockKind::MultiEcho, self.tr_mgre_ms, ViewOrdering::ReverseCentric));
        push_delay(&mut events, td3);
        events.push(ro(BlockKind::InversionRecovery2, self.tr_gre_ms, ViewOrdering::InAndOut));
        push_delay(&mut events, td4);
        events.push(Event::T2Prep { te_ms: self.t2prep_te_ms });
        events.push(ro(BlockKind::T2Prepared, self.tr_gre_ms, ViewOrdering::Centric));
        SequenceLayout { flip_deg: self.flip_deg, events }
    }
}

/// Position of the k-space center inside a segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewOrdering {
    /// Center in the middle of the segment.
    InAndOut,
    /// Center at the end of the segment.
    ReverseCentric,
    /// Center at the beginning of the segment.
    Centric,
}

impl ViewOrdering {
    pub fn center_index(self, n: usize) -> usize {
        match self {
            ViewOrdering::InAndOut => n / 2,
            ViewOrdering::ReverseCentric => n.saturating_sub(1),
            ViewOrdering::Centric => 0,
        }
    }
}

impl std::str::FromStr for ViewOrdering {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in_and_out" => Ok(ViewOrdering::InAndOut),
            "reverse_centric" => Ok(ViewOrdering::ReverseCentric),
            "centric" => Ok(ViewOrdering::Centric),
            other => Err(Error::UnknownOrdering(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    InversionRecovery1,
    MultiEcho,
    InversionRecovery2,
    T2Prepared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Event {
    Inversion { efficiency: f64 },
    Delay { ms: f64 },
    /// Instantaneous T2 preparation.
    T2Prep { te_ms: f64 },
    Readout { kind: BlockKind, n_trs: usize, tr_ms: f64, ordering: ViewOrdering },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub flip_deg: f64,
    pub events: Vec<Event>,
}

impl SequenceLayout {
    pub fn readouts(&self) -> impl Iterator<Item = (BlockKind, usize, f64, ViewOrdering)> + '_ {
        self.events.iter().filter_map(|e| match *e {
            Event::Readout { kind, n_trs, tr_ms, ordering } => Some((kind, n_trs, tr_ms, ordering)),
            _ => None,
        })
    }
}

/// Duration of one repetition in seconds; preparations are instantaneous.
pub fn repetition_duration(layout: &SequenceLayout) -> f64 {
    let ms: f64 = layout
        .events
        .iter()
        .map(|e| match *e {
            Event::Delay { ms } => ms,
            Event::Readout { n_trs, tr_ms, .. } => n_trs as f64 * tr_ms,
            Event::Inversion { .. } | Event::T2Prep { .. } => 0.0,
        })
        .sum();
    ms / 1000.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Affine {
    a: f64,
    b: f64,
}

impl Affine {
    const IDENTITY: Affine = Affine { a: 1.0, b: 0.0 };

    fn apply(self, m: f64) -> f64 {
        self.a * m + self.b
    }

    /// `other` applied after `self`.
    fn then(self, other: Affine) -> Affine {
        Affine { a: other.a * self.a, b: other.a * self.b + other.b }
    }

    fn pow(self, n: usize) -> Affine {
        let an = self.a.powi(n as i32);
        let b = if (1.0 - self.a).abs() < 1e-300 { self.b * n as f64 } else { self.b * (1.0 - an) / (1.0 - self.a) };
        Affine { a: an, b }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Relaxation {
    pub t1_ms: f64,
    pub t2_ms: f64,
    pub m0: f64,
}

impl From<&TissueParams> for Relaxation {
    fn from(p: &TissueParams) -> Self {
        Relaxation { t1_ms: p.t1_ms, t2_ms: p.t2_ms, m0: p.m0 }
    }
}

fn relax(t1: f64, m0: f64, ms: f64) -> Affine {
    let e1 = (-ms / t1).exp();
    Affine { a: e1, b: m0 * (1.0 - e1) }
}

fn event_map(e: &Event, tissue: &Relaxation, cos_a: f64) -> Affine {
    match *e {
        Event::Inversion { efficiency } => Affine { a: -efficiency, b: 0.0 },
        Event::Delay { ms } => relax(tissue.t1_ms, tissue.m0, ms),
        Event::T2Prep { te_ms } => Affine { a: (-te_ms / tissue.t2_ms).exp(), b: 0.0 },
        Event::Readout { n_trs, tr_ms, .. } => tr_map(tissue, cos_a, tr_ms).pow(n_trs),
    }
}

/// Excitation followed by free relaxation over one TR.
fn tr_map(tissue: &Relaxation, cos_a: f64, tr_ms: f64) -> Affine {
    Affine { a: cos_a, b: 0.0 }.then(relax(tissue.t1_ms, tissue.m0, tr_ms))
}

/// Steady-state magnetization of every readout block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MzTimeline {
    /// Fixed point at the start of a repetition (before the first event).
    pub repetition_start_mz: f64,
    pub block_start_mz: Vec<f64>,
    /// `Mz` just before the pulse of the TR that acquires the k-space center.
    pub center_mz: Vec<f64>,
    /// Signed transverse amplitude `center_mz * sin(flip)`.
    pub center_mxy: Vec<f64>,
}

pub fn steady_state_mz(tissue: &Relaxation, layout: &SequenceLayout) -> Result<MzTimeline> {
    let alpha = layout.flip_deg.to_radians();
    let (cos_a, sin_a) = (alpha.cos(), alpha.sin());
    let full = layout
        .events
        .iter()
        .fold(Affine::IDENTITY, |acc, e| acc.then(event_map(e, tissue, cos_a)));
    if !(full.a.abs() < 1.0) {
        return Err(Error::NonContracting(full.a.abs()));
    }
    let start = full.b / (1.0 - full.a);
    let mut m = start;
    let mut timeline = MzTimeline {
        repetition_start_mz: start,
        block_start_mz: vec![],
        center_mz: vec![],
        center_mxy: vec![],
    };
    for e in &layout.events {
        if let Event::Readout { n_trs, tr_ms, ordering, .. } = *e {
            timeline.block_start_mz.push(m);
            let c = tr_map(tissue, cos_a, tr_ms).pow(ordering.center_index(n_trs)).apply(m);
            timeline.center_mz.push(c);
            timeline.center_mxy.push(c * sin_a);
        }
        m = event_map(e, tissue, cos_a).apply(m);
    }
    Ok(timeline)
}

/// Applies one full repetition to `mz` (used to check the fixed point).
pub fn apply_repetition(mz: f64, tissue: &Relaxation, layout: &SequenceLayout) -> f64 {
    let cos_a = layout.flip_deg.to_radians().cos();
    layout.events.iter().fold(mz, |m, e| event_map(e, tissue, cos_a).apply(m))
}

/// Complex contrast images; `data[j]` for `j < n_echoes` are the echoes, then
/// IR block 1, IR block 2 and the T2-prepared image.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastImageSet {
    pub dims: Dims3,
    pub n_echoes: usize,
    pub data: Vec<Vec<Complex64>>,
}

impl ContrastImageSet {
    pub fn zeros(dims: Dims3, n_echoes: usize) -> Self {
        Self { dims, n_echoes, data: vec![vec![Complex64::new(0.0, 0.0); dims.len()]; n_echoes + 3] }
    }

    pub fn n_contrasts(&self) -> usize {
        self.data.len()
    }

    pub fn ir1(&self) -> usize {
        self.n_echoes
    }

    pub fn ir2(&self) -> usize {
        self.n_echoes + 1
    }

    pub fn t2prep(&self) -> usize {
        self.n_echoes + 2
    }

    pub fn slice(&self, ix: usize) -> ContrastImageSet {
        let r = self.dims.slice_range(ix);
        ContrastImageSet {
            dims: Dims3::new(1, self.dims.ny, self.dims.nz),
            n_echoes: self.n_echoes,
            data: self.data.iter().map(|d| d[r.clone()].to_vec()).collect(),
        }
    }

    /// Stack single-slice image sets along `x`.
    pub fn stack(slices: &[ContrastImageSet]) -> Result<ContrastImageSet> {
        let first = slices.first().ok_or_else(|| Error::Dims("no slices to stack".into()))?;
        let (ny, nz) = (first.dims.ny, first.dims.nz);
        if slices.iter().any(|s| s.dims != first.dims || s.n_echoes != first.n_echoes || s.dims.nx != 1) {
            return Err(Error::Dims("slices disagree in shape".into()));
        }
        let data = (0..first.n_contrasts())
            .map(|j| slices.iter().flat_map(|s| s.data[j].iter().copied()).collect())
            .collect();
        Ok(ContrastImageSet { dims: Dims3::new(slices.len(), ny, nz), n_echoes: first.n_echoes, data })
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().flatten().for_each(|v| *v *= s);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().flatten().map(|v| v.norm()).fold(0.0, f64::max)
    }
}

/// Complex signal of every contrast for one voxel.
pub fn voxel_signals(timeline: &MzTimeline, t2s_ms: f64, field_hz: f64, seq: &SequenceParams) -> Vec<Complex64> {
    let phase = |te: f64| Complex64::from_polar((-te / t2s_ms).exp(), 2.0 * std::f64::consts::PI * field_hz * te / 1000.0);
    let mut out: Vec<Complex64> = seq.te_mgre_ms.iter().map(|&te| timeline.center_mxy[1] * phase(te)).collect();
    for block in [0, 2, 3] {
        out.push(timeline.center_mxy[block] * phase(seq.te_gre_ms));
    }
    out
}

pub fn simulate_contrasts(phantom: &TissuePhantom, seq: &SequenceParams, field_hz: &[f64]) -> Result<ContrastImageSet> {
    if field_hz.len() != phantom.dims.len() {
        return Err(Error::LengthMismatch(field_hz.len(), phantom.dims.len()));
    }
    let layout = seq.layout();
    let mut per_label: Vec<Option<(MzTimeline, f64)>> = vec![None; 256];
    for c in &phantom.classes {
        per_label[c.label as usize] = Some((steady_state_mz(&(&c.params).into(), &layout)?, c.params.t2s_ms));
    }
    let mut set = ContrastImageSet::zeros(phantom.dims, seq.n_echoes());
    for (i, &l) in phantom.labels.iter().enumerate() {
        if let Some((tl, t2s)) = &per_label[l as usize] {
            for (j, s) in voxel_signals(tl, *t2s, field_hz[i], seq).into_iter().enumerate() {
                set.data[j][i] = s;
            }
        }
    }
    Ok(set)
}

/// Unit-norm 4-point signals `(IR1, multi-echo, IR2, T2prep)` over a `(T1, T2)` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dictionary {
    pub t1_grid: Vec<f64>,
    pub t2_grid: Vec<f64>,
    /// `(T1, T2)` of every atom, T1-major.
    pub pairs: Vec<(f64, f64)>,
    pub atoms: Vec<[f64; 4]>,
}

pub fn default_t1_grid() -> Vec<f64> {
    (0..=190).map(|i| 100.0 + 10.0 * i as f64).collect()
}

pub fn default_t2_grid() -> Vec<f64> {
    (0..=190).map(|i| 10.0 + i as f64).collect()
}

/// Signed, unnormalized 4-point signal of one tissue.
pub fn four_point_signal(tissue: &Relaxation, layout: &SequenceLayout) -> Result<[f64; 4]> {
    let tl = steady_state_mz(tissue, layout)?;
    if tl.center_mxy.len() != 4 {
        return Err(Error::Config(format!("layout has {} readout blocks, expected 4", tl.center_mxy.len())));
    }
    Ok([tl.center_mxy[0], tl.center_mxy[1], tl.center_mxy[2], tl.center_mxy[3]])
}

pub fn normalize4(v: [f64; 4]) -> Option<[f64; 4]> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return None;
    }
    Some(v.map(|x| x / n))
}

pub fn build_dictionary(seq: &SequenceParams, t1_grid: &[f64], t2_grid: &[f64]) -> Result<Dictionary> {
    let ascending = |g: &[f64]| !g.is_empty() && g.windows(2).all(|w| w[0] < w[1]);
    if !ascending(t1_grid) || !ascending(t2_grid) {
        return Err(Error::Config("dictionary grids must be nonempty and ascending".into()));
    }
    let layout = seq.layout();
    let mut pairs = Vec::new();
    let mut atoms = Vec::new();
    for &t1 in t1_grid {
        for &t2 in t2_grid.iter().filter(|&&t2| t2 < t1) {
            let s = four_point_signal(&Relaxation { t1_ms: t1, t2_ms: t2, m0: 1.0 }, &layout)?;
            let atom = normalize4(s).ok_or(Error::NonFinite("dictionary atom"))?;
            pairs.push((t1, t2));
            atoms.push(atom);
        }
    }
    if atoms.is_empty() {
        return Err(Error::EmptyDictionary);
    }
    Ok(Dictionary { t1_grid: t1_grid.to_vec(), t2_grid: t2_grid.to_vec(), pairs, atoms })
}

/// Per-contrast, per-coil centered k-space of one `ny x nz` slice.
#[derive(Debug, Clone, PartialEq)]
pub struct KSpaceSet {
    pub ny: usize,
    pub nz: usize,
    pub n_echoes: usize,
    /// `data[contrast][coil]`
    pub data: Vec<Vec<Vec<Complex64>>>,
}

impl KSpaceSet {
    pub fn n_contrasts(&self) -> usize {
        self.data.len()
    }

    pub fn n_coils(&self) -> usize {
        self.data.first().map_or(0, |d| d.len())
    }
}

/// `y = fft2c(S_c * s_j) + n`, with complex Gaussian noise of standard
/// deviation `noise_sigma` per real/imaginary component.
pub fn synthesize_kspace(images: &ContrastImageSet, coils: &CoilSet, noise_sigma: f64, seed: u64) -> Result<KSpaceSet> {
    if !(noise_sigma >= 0.0) {
        return Err(Error::Config(format!("noise sigma must be >= 0, got {noise_sigma}")));
    }
    if images.dims.nx != 1 || coils.dims != images.dims {
        return Err(Error::Dims("k-space synthesis expects matching single-slice images and coils".into()));
    }
    let (ny, nz) = (images.dims.ny, images.dims.nz);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let data = images
        .data
        .iter()
        .map(|img| {
            coils
                .maps
                .iter()
                .map(|s| {
                    let mut k: Vec<Complex64> = img.iter().zip(s).map(|(x, s)| x * s).collect();
                    fft2c(&mut k, ny, nz);
                    if noise_sigma > 0.0 {
                        for v in &mut k {
                            *v += Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng));
                        }
                    }
                    k
                })
                .collect()
        })
        .collect();
    Ok(KSpaceSet { ny, nz, n_echoes: images.n_echoes, data })
}

/// `sum_c conj(S_c) * ifft2c(y_c) / sum_c |S_c|^2` for every contrast.
pub fn coil_combine(kspace: &KSpaceSet, coils: &CoilSet) -> ContrastImageSet {
    let (ny, nz) = (kspace.ny, kspace.nz);
    let rss2: Vec<f64> = coils.rss().iter().map(|r| r * r).collect();
    let data = kspace
        .data
        .iter()
        .map(|per_coil| {
            let mut acc = vec![Complex64::new(0.0, 0.0); ny * nz];
            for (y, s) in per_coil.iter().zip(&coils.maps) {
                let mut img = y.clone();
                crate::fft::ifft2c(&mut img, ny, nz);
                for ((a, v), s) in acc.iter_mut().zip(&img).zip(s) {
                    *a += s.conj() * v;
                }
            }
            acc.iter().zip(&rss2).map(|(a, r)| a / r).collect()
        })
        .collect();
    ContrastImageSet { dims: Dims3::new(1, ny, nz), n_echoes: kspace.n_echoes, data }
}
