//! Multi-coil, multi-contrast encoding `y_jc = U_j * fft2c(S_c * x_j)`, its
//! adjoint, graph operators for the normal equations, and CG-SENSE.

use std::rc::Rc;

use mcmap_core::fft::{fft2c, ifft2c};
use mcmap_core::phantom::CoilSet;
use mcmap_diffkit::{cg_solve, Array, CustomOp, Graph, Var};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Per-contrast, per-coil k-space: `data[contrast][coil][ky * nz + kz]`.
pub type MultiCoilData = Vec<Vec<Vec<Complex64>>>;

/// Single-slice coil sensitivities shared by forward operators and graph ops.
#[derive(Debug, Clone, PartialEq)]
pub struct Coils {
    pub ny: usize,
    pub nz: usize,
    pub maps: Vec<Vec<Complex64>>,
}

impl Coils {
    pub fn from_set(set: &CoilSet) -> Result<Self> {
        if set.dims.nx != 1 {
            return Err(Error::Dims(format!("expected single-slice coils, got {} slices", set.dims.nx)));
        }
        Ok(Self { ny: set.dims.ny, nz: set.dims.nz, maps: set.maps.clone() })
    }

    pub fn n_coils(&self) -> usize {
        self.maps.len()
    }

    pub fn plane(&self) -> usize {
        self.ny * self.nz
    }

    /// `fft2c(S_c * x)` for every coil.
    pub fn encode(&self, x: &[Complex64]) -> Vec<Vec<Complex64>> {
        self.maps
            .iter()
            .map(|s| {
                let mut k: Vec<Complex64> = x.iter().zip(s).map(|(a, b)| a * b).collect();
                fft2c(&mut k, self.ny, self.nz);
                k
            })
            .collect()
    }

    /// `sum_c conj(S_c) * ifft2c(k_c)`.
    pub fn decode(&self, k: &[Vec<Complex64>]) -> Vec<Complex64> {
        let mut acc = vec![Complex64::new(0.0, 0.0); self.plane()];
        for (kc, s) in k.iter().zip(&self.maps) {
            let mut img = kc.clone();
            ifft2c(&mut img, self.ny, self.nz);
            for ((a, v), s) in acc.iter_mut().zip(&img).zip(s) {
                *a += s.conj() * v;
            }
        }
        acc
    }
}

/// Encoding operator with fixed per-contrast masks.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardModel {
    pub coils: Rc<Coils>,
    /// `masks[j][cell]` in {0, 1}.
    pub masks: Vec<Vec<f64>>,
}

impl ForwardModel {
    pub fn new(coils: Rc<Coils>, masks: Vec<Vec<f64>>) -> Result<Self> {
        let n = coils.plane();
        if let Some(m) = masks.iter().find(|m| m.len() != n) {
            return Err(Error::Dims(format!("mask of {} cells for a {n}-cell grid", m.len())));
        }
        Ok(Self { coils, masks })
    }

    pub fn n_contrasts(&self) -> usize {
        self.masks.len()
    }

    fn check(&self, n_contrasts: usize) -> Result<()> {
        if n_contrasts != self.n_contrasts() {
            return Err(Error::Dims(format!("{n_contrasts} contrasts for a {}-contrast model", self.n_contrasts())));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[Vec<Complex64>]) -> Result<MultiCoilData> {
        self.check(x.len())?;
        let n = self.coils.plane();
        if let Some(img) = x.iter().find(|v| v.len() != n) {
            return Err(Error::Dims(format!("image of {} pixels for a {n}-cell grid", img.len())));
        }
        Ok(x.iter()
            .zip(&self.masks)
            .map(|(img, m)| {
                let mut k = self.coils.encode(img);
                for kc in &mut k {
                    kc.iter_mut().zip(m).for_each(|(v, &u)| *v *= u);
                }
                k
            })
            .collect())
    }

    pub fn adjoint(&self, y: &MultiCoilData) -> Result<Vec<Vec<Complex64>>> {
        self.check(y.len())?;
        let n = self.coils.plane();
        if y.iter().any(|per| per.len() != self.coils.n_coils() || per.iter().any(|k| k.len() != n)) {
            return Err(Error::Dims("k-space does not match coils".into()));
        }
        Ok(y.iter()
            .zip(&self.masks)
            .map(|(per, m)| {
                let masked: Vec<Vec<Complex64>> = per.iter().map(|k| k.iter().zip(m).map(|(v, &u)| v * u).collect()).collect();
                self.coils.decode(&masked)
            })
            .collect())
    }
}

fn contrast_planes(a: &Array) -> impl Iterator<Item = &[Complex64]> {
    let plane = a.plane();
    a.cx().chunks(plane)
}

/// `(A^H A + rho I) x` with masks `U` as a graph input; inputs `[x, U, rho]`
/// with `x: [C,H,W]` complex, `U: [C,H,W]` real, `rho: [1]` real.
pub struct NormalOp {
    coils: Rc<Coils>,
    encoded: Vec<Vec<Vec<Complex64>>>,
}

impl NormalOp {
    pub fn new(coils: Rc<Coils>) -> Self {
        Self { coils, encoded: Vec::new() }
    }
}

impl CustomOp for NormalOp {
    fn name(&self) -> &'static str {
        "normal_op"
    }

    fn forward(&mut self, inputs: &[&Array]) -> mcmap_diffkit::Result<Array> {
        let (x, u, rho) = (inputs[0], inputs[1], inputs[2].re()[0]);
        let plane = self.coils.plane();
        if x.plane() != plane || u.shape != x.shape {
            return Err(mcmap_diffkit::Error::Shape { op: "normal_op", detail: format!("{:?} / {:?}", x.shape, u.shape) });
        }
        let mut out = Vec::with_capacity(x.len());
        self.encoded.clear();
        for (j, xj) in contrast_planes(x).enumerate() {
            let k = self.coils.encode(xj);
            let m = &u.re()[j * plane..(j + 1) * plane];
            let masked: Vec<Vec<Complex64>> = k.iter().map(|kc| kc.iter().zip(m).map(|(v, &w)| v * w).collect()).collect();
            let back = self.coils.decode(&masked);
            out.extend(back.iter().zip(xj).map(|(a, b)| a + b * rho));
            self.encoded.push(k);
        }
        Ok(Array::complex(&x.shape, out))
    }

    fn backward(&self, inputs: &[&Array], _output: &Array, grad: &Array, needs: &[bool]) -> Vec<Option<Array>> {
        let (x, u, rho) = (inputs[0], inputs[1], inputs[2].re()[0]);
        let plane = self.coils.plane();
        let mut gx = Vec::with_capacity(x.len());
        let mut gu = vec![0.0; u.len()];
        for (j, gj) in contrast_planes(grad).enumerate() {
            let kg = self.coils.encode(gj);
            let m = &u.re()[j * plane..(j + 1) * plane];
            if needs[0] {
                let masked: Vec<Vec<Complex64>> = kg.iter().map(|kc| kc.iter().zip(m).map(|(v, &w)| v * w).collect()).collect();
                let back = self.coils.decode(&masked);
                gx.extend(back.iter().zip(gj).map(|(a, b)| a + b * rho));
            }
            if needs[1] {
                let out = &mut gu[j * plane..(j + 1) * plane];
                for (kgc, kc) in kg.iter().zip(&self.encoded[j]) {
                    for (o, (a, b)) in out.iter_mut().zip(kgc.iter().zip(kc)) {
                        *o += a.re * b.re + a.im * b.im;
                    }
                }
            }
        }
        let grho = if needs[2] { Some(Array::scalar(inputs[0].dot_re(grad))) } else { None };
        vec![needs[0].then(|| Array::complex(&x.shape, gx)), needs[1].then(|| Array::real(&u.shape, gu)), grho]
    }
}

/// `A^H (U * Y)` for fully sampled data `Y`; the single input is `U: [C,H,W]`.
pub struct MaskedAdjointOp {
    coils: Rc<Coils>,
    full: Rc<MultiCoilData>,
}

impl MaskedAdjointOp {
    pub fn new(coils: Rc<Coils>, full: Rc<MultiCoilData>) -> Self {
        Self { coils, full }
    }
}

impl CustomOp for MaskedAdjointOp {
    fn name(&self) -> &'static str {
        "masked_adjoint"
    }

    fn forward(&mut self, inputs: &[&Array]) -> mcmap_diffkit::Result<Array> {
        let u = inputs[0];
        let plane = self.coils.plane();
        if u.shape.len() != 3 || u.shape[0] != self.full.len() || u.plane() != plane {
            return Err(mcmap_diffkit::Error::Shape { op: "masked_adjoint", detail: format!("mask {:?}", u.shape) });
        }
        let mut out = Vec::with_capacity(u.len());
        for (j, per) in self.full.iter().enumerate() {
            let m = &u.re()[j * plane..(j + 1) * plane];
            let masked: Vec<Vec<Complex64>> = per.iter().map(|kc| kc.iter().zip(m).map(|(v, &w)| v * w).collect()).collect();
            out.extend(self.coils.decode(&masked));
        }
        Ok(Array::complex(&u.shape, out))
    }

    fn backward(&self, inputs: &[&Array], _output: &Array, grad: &Array, needs: &[bool]) -> Vec<Option<Array>> {
        if !needs[0] {
            return vec![None];
        }
        let u = inputs[0];
        let plane = self.coils.plane();
        let mut gu = vec![0.0; u.len()];
        for (j, gj) in contrast_planes(grad).enumerate() {
            let kg = self.coils.encode(gj);
            let out = &mut gu[j * plane..(j + 1) * plane];
            for (kgc, yc) in kg.iter().zip(&self.full[j]) {
                for (o, (a, b)) in out.iter_mut().zip(kgc.iter().zip(yc)) {
                    *o += a.re * b.re + a.im * b.im;
                }
            }
        }
        vec![Some(Array::real(&u.shape, gu))]
    }
}

/// Adds `(A^H A + rho I) x` to the graph.
pub fn normal_apply(g: &mut Graph, coils: &Rc<Coils>, x: Var, u: Var, rho: Var) -> mcmap_diffkit::Result<Var> {
    g.custom(Box::new(NormalOp::new(coils.clone())), &[x, u, rho])
}

/// Images as a `[C, ny, nz]` complex array.
pub fn images_to_array(x: &[Vec<Complex64>], ny: usize, nz: usize) -> Array {
    Array::complex(&[x.len(), ny, nz], x.iter().flatten().copied().collect())
}

pub fn array_to_images(a: &Array) -> Vec<Vec<Complex64>> {
    contrast_planes(a).map(|p| p.to_vec()).collect()
}

/// Masks as a `[C, ny, nz]` real array.
pub fn masks_to_array(m: &[Vec<f64>], ny: usize, nz: usize) -> Array {
    Array::real(&[m.len(), ny, nz], m.iter().flatten().copied().collect())
}

/// Solves `(A^H A + lambda I) x = A^H y` one contrast at a time.
pub fn cg_sense(y: &MultiCoilData, model: &ForwardModel, lambda: f64, n_iter: usize, tol: f64) -> Result<Vec<Vec<Complex64>>> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let rhs = model.adjoint(y)?;
    let (ny, nz) = (model.coils.ny, model.coils.nz);
    let mut out = Vec::with_capacity(rhs.len());
    for (j, b) in rhs.iter().enumerate() {
        let mut g = Graph::new();
        let bv = g.constant(images_to_array(std::slice::from_ref(b), ny, nz));
        let u = g.constant(masks_to_array(std::slice::from_ref(&model.masks[j]), ny, nz));
        let rho = g.constant(Array::scalar(lambda));
        let coils = model.coils.clone();
        let x = cg_solve(&mut g, |g, p| normal_apply(g, &coils, p, u, rho), bv, None, n_iter, tol)?;
        let img = g.value(x).cx().to_vec();
        if img.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::NonFinite("cg_sense".into()));
        }
        out.push(img);
    }
    Ok(out)
}
