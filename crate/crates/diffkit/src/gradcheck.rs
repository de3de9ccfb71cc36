//! Central finite-difference checks of graph gradients.

use num_complex::Complex64;

use crate::array::{Array, Data};
use crate::error::Result;
use crate::graph::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Fixed projection weights turning any output into a scalar.
fn weights_like(a: &Array) -> Array {
    let w = |i: usize| (1.7 * i as f64 + 0.3).sin() + 0.25;
    match &a.data {
        Data::Real(v) => Array::real(&a.shape, (0..v.len()).map(w).collect()),
        Data::Complex(v) => Array::complex(&a.shape, (0..v.len()).map(|i| Complex64::new(w(i), w(i + 7919))).collect()),
    }
}

fn scalar_loss(g: &mut Graph, out: Var) -> Result<Var> {
    let wv = weights_like(g.value(out));
    let w = g.constant(wv);
    let d = g.dot_re(out, w)?;
    g.sum(d)
}

fn eval(inputs: &[Array], f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|a| g.param(a.clone())).collect();
    let out = f(&mut g, &vars)?;
    let l = scalar_loss(&mut g, out)?;
    Ok(g.value(l).re()[0])
}

/// Compares analytic gradients of `<W, f(inputs)>` against central differences
/// with step `h`. At most `max_coords` coordinates per input are probed, spread
/// evenly; complex inputs probe real and imaginary parts separately. The error
/// of a coordinate is `|fd - an| / max(|fd|, |an|, 1e-6)`.
pub fn gradcheck(inputs: &[Array], f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>, h: f64, max_coords: usize) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|a| g.param(a.clone())).collect();
    let out = f(&mut g, &vars)?;
    let l = scalar_loss(&mut g, out)?;
    let grads = g.backward(l)?;
    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0 };
    for (k, a) in inputs.iter().enumerate() {
        let an = grads.get(vars[k]).cloned().unwrap_or_else(|| a.zeros_like());
        let n = a.len();
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let parts: &[bool] = if a.is_complex() { &[false, true] } else { &[false] };
            for &imag in parts {
                let bump = |delta: f64| {
                    let mut p = inputs.to_vec();
                    match &mut p[k].data {
                        Data::Real(v) => v[i] += delta,
                        Data::Complex(v) if imag => v[i].im += delta,
                        Data::Complex(v) => v[i].re += delta,
                    }
                    p
                };
                let fd = (eval(&bump(h), f)? - eval(&bump(-h), f)?) / (2.0 * h);
                let a_val = match &an.data {
                    Data::Real(v) => v[i],
                    Data::Complex(v) if imag => v[i].im,
                    Data::Complex(v) => v[i].re,
                };
                let err = (fd - a_val).abs() / fd.abs().max(a_val.abs()).max(1e-6);
                report.max_rel_err = report.max_rel_err.max(err);
                report.checked += 1;
            }
        }
    }
    Ok(report)
}

/// Deterministic random arrays for checks.
pub struct Sampler(rand_chacha::ChaCha8Rng);

impl Sampler {
    pub fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        Self(rand_chacha::ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        use rand::Rng;
        self.0.random_range(lo..hi)
    }

    pub fn real(&mut self, shape: &[usize]) -> Array {
        let n = shape.iter().product();
        Array::real(shape, (0..n).map(|_| self.uniform(-1.0, 1.0)).collect())
    }

    pub fn complex(&mut self, shape: &[usize]) -> Array {
        let n = shape.iter().product();
        Array::complex(shape, (0..n).map(|_| Complex64::new(self.uniform(-1.0, 1.0), self.uniform(-1.0, 1.0))).collect())
    }

    /// Real array with entries in `[lo, hi]`, optionally with random signs.
    pub fn real_in(&mut self, shape: &[usize], lo: f64, hi: f64, signed: bool) -> Array {
        let n = shape.iter().product();
        Array::real(
            shape,
            (0..n)
                .map(|_| {
                    let v = self.uniform(lo, hi);
                    if signed && self.uniform(0.0, 1.0) < 0.5 {
                        -v
                    } else {
                        v
                    }
                })
                .collect(),
        )
    }
}

type OpCase = (&'static str, Vec<Array>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

/// One finite-difference case per differentiable operator, on small random shapes.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut s = Sampler::new(seed);
    let mut cases: Vec<OpCase> = Vec::new();
    cases.push(("add", vec![s.complex(&[2, 3, 4]), s.complex(&[2, 3, 4])], Box::new(|g, v| g.add(v[0], v[1]))));
    cases.push(("sub", vec![s.real(&[3, 5]), s.real(&[3, 5])], Box::new(|g, v| g.sub(v[0], v[1]))));
    cases.push(("scale", vec![s.complex(&[2, 4, 4])], Box::new(|g, v| Ok(g.scale(v[0], -1.7)))));
    cases.push(("scale_channels", vec![s.complex(&[3, 4, 4]), s.real(&[3])], Box::new(|g, v| g.scale_channels(v[0], v[1]))));
    cases.push(("scale_channels_shared", vec![s.real(&[3, 4, 4]), s.real(&[1])], Box::new(|g, v| g.scale_channels(v[0], v[1]))));
    cases.push(("mul", vec![s.real(&[4, 4]), s.real(&[4, 4])], Box::new(|g, v| g.mul(v[0], v[1]))));
    cases.push(("div", vec![s.real(&[6]), s.real_in(&[6], 0.5, 2.0, true)], Box::new(|g, v| g.div(v[0], v[1]))));
    cases.push(("exp", vec![s.real(&[2, 5])], Box::new(|g, v| g.exp(v[0]))));
    cases.push(("relu", vec![s.real_in(&[2, 4, 4], 0.05, 1.0, true)], Box::new(|g, v| g.relu(v[0]))));
    cases.push(("conv2d_3x3", vec![s.real(&[2, 8, 8]), s.real(&[3, 2, 3, 3]), s.real(&[3])], Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2])))));
    cases.push(("conv2d_1x1", vec![s.real(&[3, 6, 5]), s.real(&[2, 3, 1, 1]), s.real(&[2])], Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2])))));
    cases.push(("conv2d_5x5", vec![s.real(&[1, 7, 6]), s.real(&[2, 1, 5, 5])], Box::new(|g, v| g.conv2d(v[0], v[1], None))));
    cases.push(("avgpool2", vec![s.real(&[2, 6, 4])], Box::new(|g, v| g.avgpool2(v[0]))));
    cases.push(("upsample2", vec![s.real(&[2, 3, 4])], Box::new(|g, v| g.upsample2(v[0]))));
    cases.push(("concat", vec![s.real(&[1, 3, 3]), s.real(&[2, 3, 3])], Box::new(|g, v| g.concat(&[v[0], v[1]]))));
    cases.push(("slice", vec![s.complex(&[4, 3, 3])], Box::new(|g, v| g.slice(v[0], 1, 2))));
    cases.push(("pack", vec![s.complex(&[2, 3, 4])], Box::new(|g, v| g.pack(v[0]))));
    cases.push(("unpack", vec![s.real(&[4, 3, 4])], Box::new(|g, v| g.unpack(v[0]))));
    cases.push(("fft2c", vec![s.complex(&[2, 6, 5])], Box::new(|g, v| g.fft2c(v[0]))));
    cases.push(("ifft2c", vec![s.complex(&[2, 4, 7])], Box::new(|g, v| g.ifft2c(v[0]))));
    cases.push(("mask_mul", vec![s.complex(&[3, 4, 4]), s.real(&[4, 4])], Box::new(|g, v| g.mask_mul(v[0], v[1]))));
    cases.push(("dot_re", vec![s.complex(&[3, 5]), s.complex(&[3, 5])], Box::new(|g, v| g.dot_re(v[0], v[1]))));
    cases.push(("sum", vec![s.real(&[3, 4])], Box::new(|g, v| g.sum(v[0]))));
    cases.push(("mean", vec![s.real(&[3, 4])], Box::new(|g, v| g.mean(v[0]))));
    let y = s.real(&[2, 14, 13]);
    let x = Array::real(&y.shape, y.re().iter().map(|v| v + 0.3 * s.uniform(-1.0, 1.0)).collect());
    cases.push((
        "ssim",
        vec![x],
        Box::new(move |g, v| {
            let yv = g.constant(y.clone());
            g.ssim(v[0], yv)
        }),
    ));
    let diag = s.real_in(&[2, 3, 3], 0.5, 2.0, false);
    cases.push((
        "cg_solve",
        vec![s.complex(&[2, 3, 3]), s.real(&[1])],
        Box::new(move |g, v| {
            let d = g.constant(diag.clone());
            let rho = g.exp(v[1])?;
            let apply = |g: &mut Graph, p: Var| {
                let dp = g.mask_mul(p, d)?;
                let rp = g.scale_channels(p, rho)?;
                g.add(dp, rp)
            };
            crate::cg::cg_solve(g, apply, v[0], None, 4, 0.0)
        }),
    ));
    cases
}

/// Runs [`op_cases`] and reports each operator.
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    op_cases(seed).into_iter().map(|(name, inputs, f)| Ok((name, gradcheck(&inputs, f.as_ref(), 1e-5, 64)?))).collect()
}

/// Complex inner product `sum conj(a) b` over all entries (real arrays embed).
pub fn inner(a: &Array, b: &Array) -> Complex64 {
    match (&a.data, &b.data) {
        (Data::Real(x), Data::Real(y)) => Complex64::new(x.iter().zip(y).map(|(p, q)| p * q).sum(), 0.0),
        (Data::Complex(x), Data::Complex(y)) => x.iter().zip(y).map(|(p, q)| p.conj() * q).sum(),
        _ => panic!("kind mismatch"),
    }
}

/// `|<A x, y> - <x, A^H y>|` for a linear graph map, with `A^H y` obtained by
/// seeding the backward pass with `y`.
pub fn adjoint_gap(x: &Array, y: &Array, f: &dyn Fn(&mut Graph, Var) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let out = f(&mut g, xv)?;
    let ax = g.value(out).clone();
    let grads = g.backward_with(out, y.clone())?;
    let ahy = grads.get(xv).cloned().unwrap_or_else(|| x.zeros_like());
    Ok((inner(&ax, y) - inner(x, &ahy)).norm())
}
