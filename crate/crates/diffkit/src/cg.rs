//! Conjugate gradient recorded on the tape, one independent system per
//! entry of the leading axis.

use crate::array::Array;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};

/// Solves `A x = b` slab-wise for a symmetric positive definite `A` that maps
/// each leading-axis slab to itself. Runs `n_iter` iterations, stopping early
/// once every slab's residual norm is at most `tol` times its right-hand-side
/// norm. Every iteration is recorded, so gradients flow to `b`, `x0` and any
/// parameters captured by `apply`.
pub fn cg_solve<F>(g: &mut Graph, mut apply: F, b: Var, x0: Option<Var>, n_iter: usize, tol: f64) -> Result<Var>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    let (mut x, mut r) = match x0 {
        Some(x0) => {
            let ax = apply(g, x0)?;
            (x0, g.sub(b, ax)?)
        }
        None => {
            let z = g.constant(g.value(b).zeros_like());
            (z, b)
        }
    };
    let bnorm = slab_norms(g.value(b));
    let mut p = r;
    let mut rs = g.dot_re(r, r)?;
    for _ in 0..n_iter {
        if converged(g.value(rs), &bnorm, tol) {
            break;
        }
        let ap = apply(g, p)?;
        let pap = g.dot_re(p, ap)?;
        let alpha = g.div(rs, pap)?;
        let step = g.scale_channels(p, alpha)?;
        x = g.add(x, step)?;
        let dr = g.scale_channels(ap, alpha)?;
        r = g.sub(r, dr)?;
        let rs_new = g.dot_re(r, r)?;
        if !g.value(rs_new).all_finite() {
            return Err(Error::NonFinite("cg_solve"));
        }
        let beta = g.div(rs_new, rs)?;
        let pb = g.scale_channels(p, beta)?;
        p = g.add(r, pb)?;
        rs = rs_new;
    }
    if !g.value(x).all_finite() {
        return Err(Error::NonFinite("cg_solve"));
    }
    Ok(x)
}

fn slab_norms(a: &Array) -> Vec<f64> {
    let plane = a.plane();
    (0..a.shape[0])
        .map(|j| match &a.data {
            crate::array::Data::Real(v) => v[j * plane..(j + 1) * plane].iter().map(|x| x * x).sum::<f64>().sqrt(),
            crate::array::Data::Complex(v) => v[j * plane..(j + 1) * plane].iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt(),
        })
        .collect()
}

fn converged(rs: &Array, bnorm: &[f64], tol: f64) -> bool {
    rs.re().iter().zip(bnorm).all(|(&r, &b)| r.sqrt() <= tol * b)
}
