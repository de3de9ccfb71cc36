//! Reassembly of schedule-ordered readouts into per-contrast k-space and masks.

use mcmap_core::sampling::AcquisitionSchedule;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::MultiCoilData;

/// Samples of one scheduled TR: `samples[i][coil]` belongs to contrast
/// `schedule.records[record].contrast[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquiredLine {
    pub record: usize,
    pub samples: Vec<Vec<Complex64>>,
}

/// Reads each scheduled line out of fully sampled k-space, in schedule order.
pub fn acquire(schedule: &AcquisitionSchedule, full: &MultiCoilData) -> Result<Vec<AcquiredLine>> {
    let n = schedule.ny * schedule.nz;
    if full.len() != schedule.n_contrasts || full.iter().any(|per| per.iter().any(|k| k.len() != n)) {
        return Err(Error::Dims("k-space does not match schedule".into()));
    }
    Ok(schedule
        .records
        .iter()
        .enumerate()
        .filter_map(|(i, r)| {
            let cell = r.ky? * schedule.nz + r.kz?;
            let samples = r.contrast.iter().map(|&j| full[j].iter().map(|k| k[cell]).collect()).collect();
            Some(AcquiredLine { record: i, samples })
        })
        .collect())
}

/// Per-contrast k-space `y_j` (zeros where not acquired) and validity masks
/// `U_j`. Echoes of a shared multi-echo line each receive their own sample.
pub fn blocks_to_contrasts(schedule: &AcquisitionSchedule, lines: &[AcquiredLine], n_coils: usize) -> Result<(MultiCoilData, Vec<Vec<f64>>)> {
    let n = schedule.ny * schedule.nz;
    let zero = Complex64::new(0.0, 0.0);
    let mut y = vec![vec![vec![zero; n]; n_coils]; schedule.n_contrasts];
    let mut masks = vec![vec![0.0; n]; schedule.n_contrasts];
    for line in lines {
        let r = schedule
            .records
            .get(line.record)
            .ok_or_else(|| Error::Dims(format!("record {} outside a {}-record schedule", line.record, schedule.records.len())))?;
        let (Some(ky), Some(kz)) = (r.ky, r.kz) else {
            return Err(Error::Dims(format!("record {} is a dummy TR but carries data", line.record)));
        };
        if ky >= schedule.ny || kz >= schedule.nz {
            return Err(Error::Dims(format!("line ({ky},{kz}) outside the grid")));
        }
        if line.samples.len() != r.contrast.len() {
            return Err(Error::Dims(format!("record {}: {} sample sets for {} contrasts", line.record, line.samples.len(), r.contrast.len())));
        }
        let cell = ky * schedule.nz + kz;
        for (&j, per_coil) in r.contrast.iter().zip(&line.samples) {
            if j >= schedule.n_contrasts {
                return Err(Error::Dims(format!("contrast {j} outside the schedule")));
            }
            if per_coil.len() != n_coils {
                return Err(Error::Dims(format!("{} coil samples for {n_coils} coils", per_coil.len())));
            }
            for (c, &v) in per_coil.iter().enumerate() {
                y[j][c][cell] = v;
            }
            masks[j][cell] = 1.0;
        }
    }
    Ok((y, masks))
}
