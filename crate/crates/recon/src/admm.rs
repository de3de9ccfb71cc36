//! Unrolled ADMM reconstruction with CG data consistency and a learned denoiser.

use std::rc::Rc;

use mcmap_diffkit::{cg_solve, Array, Bound, Graph, ParamStore, Var};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::forward::{normal_apply, Coils, MaskedAdjointOp, MultiCoilData};
use crate::network::{denoise, NetConfig};

/// One slice of multi-coil data: sensitivities plus k-space that is either
/// fully sampled (masks applied in the graph) or already masked.
#[derive(Debug, Clone)]
pub struct SliceData {
    pub coils: Rc<Coils>,
    pub kspace: Rc<MultiCoilData>,
}

impl SliceData {
    pub fn n_contrasts(&self) -> usize {
        self.kspace.len()
    }

    pub fn check(&self) -> Result<()> {
        let n = self.coils.plane();
        let nc = self.coils.n_coils();
        if self.kspace.iter().any(|per| per.len() != nc || per.iter().any(|k| k.len() != n)) {
            return Err(Error::Dims("k-space does not match coils".into()));
        }
        Ok(())
    }
}

/// `A^H (U * Y)` in the graph, differentiable in `u: [C,H,W]`.
pub fn masked_adjoint(g: &mut Graph, data: &SliceData, u: Var) -> Result<Var> {
    data.check()?;
    Ok(g.custom(Box::new(MaskedAdjointOp::new(data.coils.clone(), data.kspace.clone())), &[u])?)
}

/// ADMM iterations with an arbitrary denoiser; `log_rho` holds one entry per
/// unroll.
pub fn admm_iterate<D>(
    g: &mut Graph,
    data: &SliceData,
    u: Var,
    log_rho: Var,
    unrolls: usize,
    cg_iterations: usize,
    mut denoiser: D,
) -> Result<Var>
where
    D: FnMut(&mut Graph, Var) -> Result<Var>,
{
    data.check()?;
    if g.value(log_rho).len() < unrolls {
        return Err(Error::Dims(format!("{} penalties for {unrolls} unrolls", g.value(log_rho).len())));
    }
    let x0 = masked_adjoint(g, data, u)?;
    let mut x = x0;
    let mut z = x0;
    let mut dual: Option<Var> = None;
    for k in 0..unrolls {
        let lr = g.slice(log_rho, k, 1)?;
        let rho = g.exp(lr)?;
        let zu = match dual {
            Some(d) => g.sub(z, d)?,
            None => z,
        };
        let pen = g.scale_channels(zu, rho)?;
        let rhs = g.add(x0, pen)?;
        let coils = data.coils.clone();
        x = cg_solve(g, |g, p| normal_apply(g, &coils, p, u, rho), rhs, Some(x), cg_iterations, 0.0)?;
        let v = match dual {
            Some(d) => g.add(x, d)?,
            None => x,
        };
        z = denoiser(g, v)?;
        let step = g.sub(x, z)?;
        dual = Some(match dual {
            Some(d) => g.add(d, step)?,
            None => step,
        });
        if !g.value(z).all_finite() {
            return Err(Error::NonFinite(format!("unroll {k}")));
        }
    }
    Ok(z)
}

/// The learned reconstruction: shared denoiser weights, per-unroll penalties.
pub fn admm_unrolled(g: &mut Graph, b: &Bound, cfg: &NetConfig, n_echoes: usize, data: &SliceData, u: Var, fusion: bool) -> Result<Var> {
    let log_rho = b.var("admm.log_rho");
    admm_iterate(g, data, u, log_rho, cfg.unrolls, cfg.cg_iterations, |g, v| denoise(g, b, v, n_echoes, fusion))
}

/// Inference on one slice with fixed masks `[C][cell]`; returns per-contrast images.
pub fn reconstruct_slice(
    params: &ParamStore,
    cfg: &NetConfig,
    n_echoes: usize,
    data: &SliceData,
    masks: &[Vec<f64>],
    fusion: bool,
) -> Result<Vec<Vec<Complex64>>> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, &|_| true);
    let (ny, nz) = (data.coils.ny, data.coils.nz);
    let u = g.constant(crate::forward::masks_to_array(masks, ny, nz));
    let z = admm_unrolled(&mut g, &b, cfg, n_echoes, data, u, fusion)?;
    Ok(crate::forward::array_to_images(g.value(z)))
}

/// Zero-filled coil-combined adjoint `A^H (U * Y)`.
pub fn zero_filled(data: &SliceData, masks: &[Vec<f64>]) -> Result<Vec<Vec<Complex64>>> {
    let mut g = Graph::new();
    let (ny, nz) = (data.coils.ny, data.coils.nz);
    let u = g.constant(Array::real(&[masks.len(), ny, nz], masks.iter().flatten().copied().collect()));
    let x = masked_adjoint(&mut g, data, u)?;
    Ok(crate::forward::array_to_images(g.value(x)))
}
