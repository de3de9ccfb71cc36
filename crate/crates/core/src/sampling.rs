//! K-space acquisition geometry on the `ky x kz` phase-encode plane.
//!
//! Coordinates: cell `(iy, iz)` lies at `((iy - ny/2) / (ny/2), (iz - nz/2) / (nz/2))`
//! relative to the DC sample of a centered transform; fan angles and radii are
//! measured in these normalized units.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqsim::{SequenceLayout, ViewOrdering};

/// Boolean `ny x nz` grid marking the elliptical acquisition region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportMask {
    pub ny: usize,
    pub nz: usize,
    pub cells: Vec<bool>,
}

impl SupportMask {
    pub fn full(ny: usize, nz: usize) -> Self {
        Self { ny, nz, cells: vec![true; ny * nz] }
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.len() as f64
    }
}

fn polar(iy: usize, iz: usize, ny: usize, nz: usize) -> (f64, f64) {
    let u = (iy as f64 - (ny / 2) as f64) / (ny as f64 / 2.0);
    let v = (iz as f64 - (nz / 2) as f64) / (nz as f64 / 2.0);
    (v.atan2(u), (u * u + v * v).sqrt())
}

/// Inscribed ellipse, tested on geometric cell centers.
pub fn elliptical_support(ny: usize, nz: usize) -> SupportMask {
    let (hy, hz) = (ny as f64 / 2.0, nz as f64 / 2.0);
    let cells = (0..ny * nz)
        .map(|i| {
            let u = (((i / nz) as f64) + 0.5 - hy) / hy;
            let v = (((i % nz) as f64) + 0.5 - hz) / hz;
            u * u + v * v <= 1.0
        })
        .collect();
    SupportMask { ny, nz, cells }
}

/// Central `size x size` block around DC (clipped to the grid).
pub fn calibration_block(ny: usize, nz: usize, size: usize) -> Vec<bool> {
    let mut out = vec![false; ny * nz];
    if size == 0 {
        return out;
    }
    let y0 = (ny / 2).saturating_sub(size / 2);
    let z0 = (nz / 2).saturating_sub(size / 2);
    for iy in y0..(y0 + size).min(ny) {
        for iz in z0..(z0 + size).min(nz) {
            out[iy * nz + iz] = true;
        }
    }
    out
}

/// One sampled location inside a fan segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentCell {
    pub cell: usize,
    pub radius: f64,
}

/// Fan segments of the acquired locations, each sorted center-out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentAssignment {
    pub ny: usize,
    pub nz: usize,
    pub trs_per_segment: usize,
    pub segments: Vec<Vec<SegmentCell>>,
}

impl SegmentAssignment {
    pub fn assigned(&self) -> usize {
        self.segments.iter().map(Vec::len).sum()
    }

    /// `(segment, rank)` of every cell, `None` where unassigned.
    pub fn lookup(&self) -> Vec<Option<(usize, usize)>> {
        let mut out = vec![None; self.ny * self.nz];
        for (s, seg) in self.segments.iter().enumerate() {
            for (r, c) in seg.iter().enumerate() {
                out[c.cell] = Some((s, r));
            }
        }
        out
    }

    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.ny * self.nz];
        for c in self.segments.iter().flatten() {
            m[c.cell] = true;
        }
        m
    }
}

/// Sort cells by `(angle, radius, raster index)` and cut into `n` contiguous fans
/// whose sizes differ by at most one.
fn angular_fans(cells: &[usize], ny: usize, nz: usize, n: usize) -> Vec<Vec<SegmentCell>> {
    let mut keyed: Vec<(f64, f64, usize)> = cells
        .iter()
        .map(|&c| {
            let (a, r) = polar(c / nz, c % nz, ny, nz);
            (a, r, c)
        })
        .collect();
    keyed.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)).then(x.2.cmp(&y.2)));
    let base = keyed.len() / n;
    let extra = keyed.len() % n;
    let mut out = Vec::with_capacity(n);
    let mut it = keyed.into_iter();
    for s in 0..n {
        let take = base + usize::from(s < extra);
        let mut fan: Vec<SegmentCell> = it.by_ref().take(take).map(|(_, radius, cell)| SegmentCell { cell, radius }).collect();
        fan.sort_by(|a, b| a.radius.total_cmp(&b.radius).then(a.cell.cmp(&b.cell)));
        out.push(fan);
    }
    out
}

/// Partition the support into `n_segments` angular fans of exactly
/// `trs_per_segment` locations, dropping the outermost locations of each fan.
pub fn fanbeam_segments(support: &SupportMask, n_segments: usize, trs_per_segment: usize) -> Result<SegmentAssignment> {
    if n_segments == 0 || trs_per_segment == 0 {
        return Err(Error::Config("segments and TRs per segment must be positive".into()));
    }
    let cells: Vec<usize> = (0..support.len()).filter(|&i| support.cells[i]).collect();
    let need = n_segments * trs_per_segment;
    if cells.len() < need {
        return Err(Error::InsufficientSupport { need, have: cells.len() });
    }
    let mut segments = angular_fans(&cells, support.ny, support.nz, n_segments);
    for seg in &mut segments {
        if seg.len() < trs_per_segment {
            return Err(Error::InsufficientSupport { need, have: cells.len() });
        }
        seg.truncate(trs_per_segment);
    }
    Ok(SegmentAssignment { ny: support.ny, nz: support.nz, trs_per_segment, segments })
}

/// Order items with the given radii; returns indices into `radii`.
pub fn order_by_radius(radii: &[f64], strategy: ViewOrdering) -> Vec<usize> {
    let mut asc: Vec<usize> = (0..radii.len()).collect();
    asc.sort_by(|&a, &b| radii[a].total_cmp(&radii[b]).then(a.cmp(&b)));
    match strategy {
        ViewOrdering::Centric => asc,
        ViewOrdering::ReverseCentric => {
            asc.reverse();
            asc
        }
        ViewOrdering::InAndOut => {
            let n = asc.len();
            let c = n / 2;
            let mut out = vec![0; n];
            let (mut left, mut right) = (c as isize - 1, c + 1);
            let mut it = asc.into_iter();
            if let Some(first) = it.next() {
                out[c] = first;
            }
            let mut go_right = true;
            for idx in it {
                let right_free = right < n;
                let left_free = left >= 0;
                if (go_right && right_free) || !left_free {
                    out[right] = idx;
                    right += 1;
                } else {
                    out[left as usize] = idx;
                    left -= 1;
                }
                go_right = !go_right;
            }
            out
        }
    }
}

/// TR-ordered cell list of one segment.
pub fn order_segment(assignment: &SegmentAssignment, segment_id: usize, strategy: ViewOrdering) -> Result<Vec<usize>> {
    let seg = assignment
        .segments
        .get(segment_id)
        .ok_or_else(|| Error::Config(format!("segment {segment_id} does not exist")))?;
    let radii: Vec<f64> = seg.iter().map(|c| c.radius).collect();
    Ok(order_by_radius(&radii, strategy).into_iter().map(|i| seg[i].cell).collect())
}

/// Multi-level variable-density probability map: concentric levels in
/// normalized radius, the innermost fully sampled, the others with
/// geometrically decreasing densities scaled to the requested ratio over
/// `region` (the whole grid when `None`).
pub fn multilevel_density(ny: usize, nz: usize, ratio: f64, n_levels: usize, region: Option<&[bool]>) -> Result<Vec<f64>> {
    const DECAY: f64 = 0.5;
    if !(ratio > 0.0 && ratio <= 1.0) || n_levels == 0 {
        return Err(Error::Config(format!("ratio {ratio} must lie in (0, 1] with at least one level")));
    }
    let inside = |i: usize| region.is_none_or(|r| r[i]);
    let n_region = (0..ny * nz).filter(|&i| inside(i)).count();
    let level: Vec<usize> = (0..ny * nz)
        .map(|i| {
            let (_, r) = polar(i / nz, i % nz, ny, nz);
            ((r * n_levels as f64).floor() as usize).min(n_levels - 1)
        })
        .collect();
    let mut counts = vec![0usize; n_levels];
    for i in (0..ny * nz).filter(|&i| inside(i)) {
        counts[level[i]] += 1;
    }
    let target = ratio * n_region as f64;
    let floor = counts[0] as f64 / n_region as f64;
    if counts[0] as f64 > target + 1e-9 {
        return Err(Error::InfeasibleRatio { ratio, floor });
    }
    let density_of = |scale: f64, l: usize| if l == 0 { 1.0 } else { (scale * DECAY.powi(l as i32 - 1)).min(1.0) };
    let expected = |scale: f64| (0..n_levels).map(|l| counts[l] as f64 * density_of(scale, l)).sum::<f64>();
    let scale = if expected(f64::MAX / 4.0) <= target {
        f64::MAX / 4.0
    } else {
        let (mut lo, mut hi) = (0.0, 1.0);
        while expected(hi) < target {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if expected(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    Ok((0..ny * nz).map(|i| if inside(i) { density_of(scale, level[i]) } else { 0.0 }).collect())
}

/// Independent Bernoulli draw from [`multilevel_density`].
pub fn baseline_vd_mask(ny: usize, nz: usize, ratio: f64, n_levels: usize, region: Option<&[bool]>, seed: u64) -> Result<Vec<bool>> {
    let density = multilevel_density(ny, nz, ratio, n_levels, region)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(density.iter().map(|&p| rng.random::<f64>() < p).collect())
}

pub const PROB_EPS: f64 = 1e-4;

/// Sampling probabilities of one contrast together with what the backward pass needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub p: Vec<f64>,
    pub slope: f64,
    /// Multiplicative renormalization factor (1 when not renormalizing).
    pub scale: f64,
    sig: Vec<f64>,
    /// Cells whose probability depends on the weights.
    free: Vec<bool>,
    renormalized: bool,
}

/// `P = sigmoid(slope * w)` on `support`, optionally rescaled (with clipping to
/// `(eps, 1 - eps)`) so that the mean over the support equals `target`.
/// Cells in `forced` are always sampled and count as `1 - eps`; cells outside
/// the support have probability zero.
pub fn prob_from_weights(w: &[f64], slope: f64, target: Option<f64>, support: &[bool], forced: &[bool]) -> ProbMap {
    let n = w.len();
    let sig: Vec<f64> = w.iter().map(|&x| 1.0 / (1.0 + (-slope * x).exp())).collect();
    let hi = 1.0 - PROB_EPS;
    let mut free: Vec<bool> = (0..n).map(|i| support[i] && !forced[i]).collect();
    let fixed = |i: usize| if forced[i] && support[i] { hi } else { 0.0 };
    let Some(target) = target else {
        let p = (0..n).map(|i| if free[i] { sig[i] } else { fixed(i) }).collect();
        return ProbMap { p, slope, scale: 1.0, sig, free, renormalized: false };
    };
    let n_support = support.iter().filter(|&&s| s).count().max(1) as f64;
    let clip = |v: f64| v.clamp(PROB_EPS, hi);
    let mean_at = |c: f64| {
        (0..n)
            .map(|i| if free[i] { clip(c * sig[i]) } else { fixed(i) })
            .sum::<f64>()
            / n_support
    };
    let (mut lo, mut hi_c) = (0.0, 1.0);
    while mean_at(hi_c) < target && hi_c < 1e300 {
        hi_c *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi_c);
        if mean_at(mid) < target {
            lo = mid;
        } else {
            hi_c = mid;
        }
    }
    let scale = 0.5 * (lo + hi_c);
    let mut p = vec![0.0; n];
    for i in 0..n {
        if free[i] {
            let v = scale * sig[i];
            if v <= PROB_EPS || v >= hi {
                free[i] = false;
            }
            p[i] = clip(v);
        } else {
            p[i] = fixed(i);
        }
    }
    ProbMap { p, slope, scale, sig, free, renormalized: true }
}

impl ProbMap {
    /// Vector-Jacobian product: weight gradient from a probability gradient.
    pub fn backward(&self, grad_p: &[f64]) -> Vec<f64> {
        let n = self.p.len();
        let mut dsig = vec![0.0; n];
        if self.renormalized {
            let (mut g_sig, mut s_sum) = (0.0, 0.0);
            for i in (0..n).filter(|&i| self.free[i]) {
                g_sig += grad_p[i] * self.sig[i];
                s_sum += self.sig[i];
            }
            let shift = if s_sum > 0.0 { g_sig / s_sum } else { 0.0 };
            for i in (0..n).filter(|&i| self.free[i]) {
                dsig[i] = self.scale * (grad_p[i] - shift);
            }
        } else {
            for i in (0..n).filter(|&i| self.free[i]) {
                dsig[i] = grad_p[i];
            }
        }
        (0..n).map(|i| dsig[i] * self.slope * self.sig[i] * (1.0 - self.sig[i])).collect()
    }

    pub fn mean_over(&self, support: &[bool]) -> f64 {
        let n = support.iter().filter(|&&s| s).count().max(1) as f64;
        self.p.iter().zip(support).filter(|(_, &s)| s).map(|(p, _)| p).sum::<f64>() / n
    }
}

/// Binary mask `U = 1[z < P]` with forced cells set; one uniform is consumed per
/// cell in raster order regardless of the support.
pub fn draw_mask<R: Rng>(p: &[f64], forced: &[bool], rng: &mut R) -> Vec<f64> {
    p.iter()
        .zip(forced)
        .map(|(&p, &f)| {
            let z: f64 = rng.random();
            if f || z < p { 1.0 } else { 0.0 }
        })
        .collect()
}

/// Straight-through backward rule of [`draw_mask`]: identity on cells the
/// probabilities control, zero on forced cells.
pub fn draw_mask_backward(grad_u: &[f64], forced: &[bool]) -> Vec<f64> {
    grad_u.iter().zip(forced).map(|(&g, &f)| if f { 0.0 } else { g }).collect()
}

/// One TR of the acquisition schedule. `contrasts` lists the contrasts for
/// which the line is valid (all echoes share a multi-echo line); dummy TRs
/// that keep the steady state without acquiring data have no line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleRecord {
    pub repetition: usize,
    pub block: usize,
    pub tr: usize,
    pub ky: Option<usize>,
    pub kz: Option<usize>,
    pub contrast: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionSchedule {
    pub ny: usize,
    pub nz: usize,
    pub n_repetitions: usize,
    pub trs_per_segment: usize,
    pub n_contrasts: usize,
    pub records: Vec<ScheduleRecord>,
}

impl AcquisitionSchedule {
    /// Binary mask of every contrast implied by the schedule.
    pub fn implied_masks(&self) -> Vec<Vec<bool>> {
        let mut masks = vec![vec![false; self.ny * self.nz]; self.n_contrasts];
        for r in &self.records {
            if let (Some(ky), Some(kz)) = (r.ky, r.kz) {
                for &j in &r.contrast {
                    masks[j][ky * self.nz + kz] = true;
                }
            }
        }
        masks
    }

    /// Acquired (non-dummy) lines per block.
    pub fn lines_per_block(&self) -> Vec<usize> {
        let n_blocks = self.records.iter().map(|r| r.block + 1).max().unwrap_or(0);
        let mut out = vec![0; n_blocks];
        for r in self.records.iter().filter(|r| r.ky.is_some()) {
            out[r.block] += 1;
        }
        out
    }
}

/// Realize per-contrast masks as a fan-beam schedule. Contrast layout: echoes
/// `0..n_echoes` share the multi-echo block's line set (the union of their
/// masks), then IR block 1, IR block 2 and the T2-prepared block each own one
/// block. Fans holding fewer lines than TRs are padded with dummy TRs placed
/// where the largest radii would go.
pub fn schedule_undersampled(
    masks: &[Vec<bool>],
    n_echoes: usize,
    support: &SupportMask,
    n_repetitions: usize,
    layout: &SequenceLayout,
) -> Result<AcquisitionSchedule> {
    let (ny, nz) = (support.ny, support.nz);
    let n_contrasts = n_echoes + 3;
    if masks.len() != n_contrasts {
        return Err(Error::LengthMismatch(masks.len(), n_contrasts));
    }
    if n_repetitions == 0 {
        return Err(Error::Config("need at least one repetition".into()));
    }
    for (j, m) in masks.iter().enumerate() {
        if m.len() != ny * nz {
            return Err(Error::LengthMismatch(m.len(), ny * nz));
        }
        if m.iter().zip(&support.cells).any(|(&a, &s)| a && !s) {
            return Err(Error::MaskOutsideSupport(j));
        }
    }
    let readouts: Vec<_> = layout.readouts().collect();
    if readouts.len() != 4 {
        return Err(Error::Config(format!("layout has {} readout blocks, expected 4", readouts.len())));
    }
    let block_contrasts: [Vec<usize>; 4] =
        [vec![n_echoes], (0..n_echoes).collect(), vec![n_echoes + 1], vec![n_echoes + 2]];
    let mut records = Vec::new();
    let mut trs_per_segment = 0;
    let mut block_fans = Vec::with_capacity(4);
    for (b, contrasts) in block_contrasts.iter().enumerate() {
        let (_, n_trs, _, ordering) = readouts[b];
        trs_per_segment = trs_per_segment.max(n_trs);
        let cells: Vec<usize> = (0..ny * nz).filter(|&i| contrasts.iter().any(|&j| masks[j][i])).collect();
        let capacity = n_repetitions * n_trs;
        if cells.len() > capacity {
            return Err(Error::ScheduleOverflow { block: b, count: cells.len(), capacity });
        }
        let fans = angular_fans(&cells, ny, nz, n_repetitions);
        let ordered: Vec<Vec<Option<usize>>> = fans
            .iter()
            .map(|fan| {
                let mut radii: Vec<f64> = fan.iter().map(|c| c.radius).collect();
                radii.resize(n_trs, f64::INFINITY);
                order_by_radius(&radii, ordering).into_iter().map(|i| fan.get(i).map(|c| c.cell)).collect()
            })
            .collect();
        block_fans.push(ordered);
    }
    for rep in 0..n_repetitions {
        for (b, contrasts) in block_contrasts.iter().enumerate() {
            for (tr, cell) in block_fans[b][rep].iter().enumerate() {
                let (ky, kz, contrast) = match cell {
                    Some(c) => (Some(c / nz), Some(c % nz), contrasts.iter().copied().filter(|&j| masks[j][*c]).collect()),
                    None => (None, None, vec![]),
                };
                records.push(ScheduleRecord { repetition: rep, block: b, tr, ky, kz, contrast });
            }
        }
    }
    Ok(AcquisitionSchedule { ny, nz, n_repetitions, trs_per_segment, n_contrasts, records })
}
