//! Tape of array-valued nodes with reverse accumulation.
//!
//! Complex gradients are stored as `dL/dRe + i dL/dIm`, the conjugate
//! Wirtinger derivative scaled by two, so a linear map `A` pulls a gradient
//! back through its adjoint `A^H`.

use num_complex::Complex64;

use crate::array::{Array, Data};
use crate::conv;
use crate::error::{shape_err, Error, Result};
use crate::ssim;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-supplied node with its own forward and backward rules.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    /// Computes the output; may retain intermediates for `backward`.
    fn forward(&mut self, inputs: &[&Array]) -> Result<Array>;
    /// Gradient for each input; `needs[i]` tells whether input `i` wants one.
    fn backward(&self, inputs: &[&Array], output: &Array, grad: &Array, needs: &[bool]) -> Vec<Option<Array>>;
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    ScaleChannels(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Exp(usize),
    Relu(usize),
    Conv2d { x: usize, w: usize, b: Option<usize>, k: usize },
    AvgPool2(usize),
    Upsample2(usize),
    Concat(Vec<usize>),
    Slice { a: usize, start: usize },
    Pack(usize),
    Unpack(usize),
    Fft(usize),
    Ifft(usize),
    MaskMul(usize, usize),
    DotRe(usize, usize),
    Sum(usize),
    Mean(usize),
    Ssim(usize, usize),
    Custom(Box<dyn CustomOp>, Vec<usize>),
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by variable, filled by [`Graph::backward`].
pub struct Grads {
    grads: Vec<Option<Array>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape(op: &'static str, a: &Array, b: &Array) -> Result<()> {
    if a.shape != b.shape || a.is_complex() != b.is_complex() {
        return shape_err(op, format!("{:?}{} vs {:?}{}", a.shape, kind(a), b.shape, kind(b)));
    }
    Ok(())
}

fn kind(a: &Array) -> &'static str {
    if a.is_complex() {
        " complex"
    } else {
        " real"
    }
}

fn map_data(a: &Array, fr: impl Fn(f64) -> f64, fc: impl Fn(Complex64) -> Complex64) -> Array {
    match &a.data {
        Data::Real(v) => Array::real(&a.shape, v.iter().map(|&x| fr(x)).collect()),
        Data::Complex(v) => Array::complex(&a.shape, v.iter().map(|&x| fc(x)).collect()),
    }
}

fn zip_data(a: &Array, b: &Array, fr: impl Fn(f64, f64) -> f64, fc: impl Fn(Complex64, Complex64) -> Complex64) -> Array {
    match (&a.data, &b.data) {
        (Data::Real(x), Data::Real(y)) => Array::real(&a.shape, x.iter().zip(y).map(|(&p, &q)| fr(p, q)).collect()),
        (Data::Complex(x), Data::Complex(y)) => Array::complex(&a.shape, x.iter().zip(y).map(|(&p, &q)| fc(p, q)).collect()),
        _ => panic!("kind mismatch"),
    }
}

/// Multiplies each leading-axis slab by its own real factor (one factor broadcasts).
fn scale_slabs(a: &Array, s: &[f64]) -> Array {
    let plane = a.plane();
    let f = |i: usize| if s.len() == 1 { s[0] } else { s[i / plane] };
    match &a.data {
        Data::Real(v) => Array::real(&a.shape, v.iter().enumerate().map(|(i, &x)| f(i) * x).collect()),
        Data::Complex(v) => Array::complex(&a.shape, v.iter().enumerate().map(|(i, &x)| x * f(i)).collect()),
    }
}

/// Per-slab `Re <a, b>` along the leading axis.
fn slab_dots(a: &Array, b: &Array) -> Vec<f64> {
    let c = a.shape[0];
    let plane = a.plane();
    match (&a.data, &b.data) {
        (Data::Real(x), Data::Real(y)) => (0..c).map(|j| x[j * plane..(j + 1) * plane].iter().zip(&y[j * plane..(j + 1) * plane]).map(|(p, q)| p * q).sum()).collect(),
        (Data::Complex(x), Data::Complex(y)) => (0..c)
            .map(|j| x[j * plane..(j + 1) * plane].iter().zip(&y[j * plane..(j + 1) * plane]).map(|(p, q)| p.re * q.re + p.im * q.im).sum())
            .collect(),
        _ => panic!("kind mismatch"),
    }
}

fn fft_planes(a: &Array, inverse: bool) -> Result<Array> {
    let z = a.expect_complex("fft")?;
    if a.shape.len() < 2 {
        return shape_err("fft", format!("needs at least 2 axes, got {:?}", a.shape));
    }
    let (h, w) = (a.shape[a.shape.len() - 2], a.shape[a.shape.len() - 1]);
    let mut out = z.to_vec();
    for chunk in out.chunks_mut(h * w) {
        if inverse {
            mcmap_core::fft::ifft2c(chunk, h, w);
        } else {
            mcmap_core::fft::fft2c(chunk, h, w);
        }
    }
    Ok(Array::complex(&a.shape, out))
}

fn chw(op: &'static str, a: &Array) -> Result<(usize, usize, usize)> {
    match a.shape[..] {
        [c, h, w] => Ok((c, h, w)),
        _ => shape_err(op, format!("expected [C, H, W], got {:?}", a.shape)),
    }
}

fn avgpool2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let b = ch * h * w + 2 * y * w + 2 * xx;
                out[(ch * oh + y) * ow + xx] = 0.25 * (x[b] + x[b + 1] + x[b + w] + x[b + w + 1]);
            }
        }
    }
    out
}

fn avgpool2_backward(g: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let v = 0.25 * g[(ch * oh + y) * ow + xx];
                let b = ch * h * w + 2 * y * w + 2 * xx;
                out[b] = v;
                out[b + 1] = v;
                out[b + w] = v;
                out[b + w + 1] = v;
            }
        }
    }
    out
}

fn upsample2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                out[(ch * oh + y) * ow + xx] = x[(ch * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

fn upsample2_backward(g: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                out[(ch * h + y / 2) * w + xx / 2] += g[(ch * oh + y) * ow + xx];
            }
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Array, op: Op, parents: &[usize]) -> Var {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Array) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Array) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let v = zip_data(self.value(a), self.value(b), |p, q| p + q, |p, q| p + q);
        Ok(self.push(v, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let v = zip_data(self.value(a), self.value(b), |p, q| p - q, |p, q| p - q);
        Ok(self.push(v, Op::Sub(a.0, b.0), &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = map_data(self.value(a), |x| s * x, |x| x * s);
        self.push(v, Op::Scale(a.0, s), &[a.0])
    }

    /// Multiplies slab `j` of `x` along the leading axis by real `s[j]`;
    /// `s` has one element per slab or a single element.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).expect_real("scale_channels")?.to_vec();
        let xv = self.value(x);
        if sv.len() != 1 && (xv.shape.is_empty() || sv.len() != xv.shape[0]) {
            return shape_err("scale_channels", format!("{} factors for {:?}", sv.len(), xv.shape));
        }
        let v = scale_slabs(xv, &sv);
        Ok(self.push(v, Op::ScaleChannels(x.0, s.0), &[x.0, s.0]))
    }

    /// Real elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let (x, y) = (self.value(a).expect_real("mul")?, self.value(b).expect_real("mul")?);
        let v = Array::real(&self.value(a).shape, x.iter().zip(y).map(|(p, q)| p * q).collect());
        Ok(self.push(v, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    /// Real elementwise quotient; a zero denominator yields 0 with zero gradient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("div", self.value(a), self.value(b))?;
        let (x, y) = (self.value(a).expect_real("div")?, self.value(b).expect_real("div")?);
        let v = Array::real(&self.value(a).shape, x.iter().zip(y).map(|(&p, &q)| if q == 0.0 { 0.0 } else { p / q }).collect());
        Ok(self.push(v, Op::Div(a.0, b.0), &[a.0, b.0]))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a).expect_real("exp")?;
        let v = Array::real(&self.value(a).shape, x.iter().map(|p| p.exp()).collect());
        Ok(self.push(v, Op::Exp(a.0), &[a.0]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a).expect_real("relu")?;
        let v = Array::real(&self.value(a).shape, x.iter().map(|&p| p.max(0.0)).collect());
        Ok(self.push(v, Op::Relu(a.0), &[a.0]))
    }

    /// Same-padded cross-correlation; `x: [Cin,H,W]`, `w: [Cout,Cin,k,k]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (cin, h, wd) = chw("conv2d", self.value(x))?;
        let kv = self.value(w);
        let (cout, k) = match kv.shape[..] {
            [co, ci, k1, k2] if ci == cin && k1 == k2 && k1 % 2 == 1 => (co, k1),
            _ => return shape_err("conv2d", format!("kernel {:?} for input {:?}", kv.shape, self.value(x).shape)),
        };
        let bias = match b {
            Some(bv) => {
                let bb = self.value(bv).expect_real("conv2d bias")?;
                if bb.len() != cout {
                    return shape_err("conv2d", format!("bias of {} for {cout} outputs", bb.len()));
                }
                Some(bb)
            }
            None => None,
        };
        let out = conv::conv2d_forward(self.value(x).expect_real("conv2d")?, kv.expect_real("conv2d kernel")?, bias, cin, cout, h, wd, k);
        let mut parents = vec![x.0, w.0];
        parents.extend(b.map(|v| v.0));
        Ok(self.push(Array::real(&[cout, h, wd], out), Op::Conv2d { x: x.0, w: w.0, b: b.map(|v| v.0), k }, &parents))
    }

    pub fn avgpool2(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = chw("avgpool2", self.value(a))?;
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err("avgpool2", format!("odd spatial size {h}x{w}"));
        }
        let v = avgpool2(self.value(a).expect_real("avgpool2")?, c, h, w);
        Ok(self.push(Array::real(&[c, h / 2, w / 2], v), Op::AvgPool2(a.0), &[a.0]))
    }

    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = chw("upsample2", self.value(a))?;
        let v = upsample2(self.value(a).expect_real("upsample2")?, c, h, w);
        Ok(self.push(Array::real(&[c, 2 * h, 2 * w], v), Op::Upsample2(a.0), &[a.0]))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return shape_err("concat", "no inputs");
        };
        let f = self.value(*first);
        let tail = f.shape[1..].to_vec();
        let complex = f.is_complex();
        let mut lead = 0;
        for p in parts {
            let a = self.value(*p);
            if a.shape[1..] != tail[..] || a.is_complex() != complex {
                return shape_err("concat", format!("{:?} vs {:?}", a.shape, f.shape));
            }
            lead += a.shape[0];
        }
        let mut shape = vec![lead];
        shape.extend(&tail);
        let v = if complex {
            Array::complex(&shape, parts.iter().flat_map(|p| self.value(*p).cx().iter().copied()).collect())
        } else {
            Array::real(&shape, parts.iter().flat_map(|p| self.value(*p).re().iter().copied()).collect())
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(v, Op::Concat(ids.clone()), &ids))
    }

    /// Entries `start..start + len` of the leading axis.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if av.shape.is_empty() || start + len > av.shape[0] {
            return shape_err("slice", format!("{start}..{} of {:?}", start + len, av.shape));
        }
        let plane = av.plane();
        let mut shape = av.shape.clone();
        shape[0] = len;
        let r = start * plane..(start + len) * plane;
        let v = match &av.data {
            Data::Real(x) => Array::real(&shape, x[r].to_vec()),
            Data::Complex(x) => Array::complex(&shape, x[r].to_vec()),
        };
        Ok(self.push(v, Op::Slice { a: a.0, start }, &[a.0]))
    }

    /// Complex `[C, ...]` to real `[2C, ...]` with real then imaginary parts per channel.
    pub fn pack(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let z = av.expect_complex("pack")?;
        let plane = av.plane();
        let mut shape = av.shape.clone();
        shape[0] *= 2;
        let mut out = Vec::with_capacity(2 * z.len());
        for ch in z.chunks(plane) {
            out.extend(ch.iter().map(|c| c.re));
            out.extend(ch.iter().map(|c| c.im));
        }
        Ok(self.push(Array::real(&shape, out), Op::Pack(a.0), &[a.0]))
    }

    /// Inverse of [`Graph::pack`].
    pub fn unpack(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let r = av.expect_real("unpack")?;
        if av.shape.is_empty() || av.shape[0] % 2 != 0 {
            return shape_err("unpack", format!("odd leading axis {:?}", av.shape));
        }
        let plane = av.plane();
        let mut shape = av.shape.clone();
        shape[0] /= 2;
        let mut out = Vec::with_capacity(r.len() / 2);
        for ch in r.chunks(2 * plane) {
            out.extend(ch[..plane].iter().zip(&ch[plane..]).map(|(&re, &im)| Complex64::new(re, im)));
        }
        Ok(self.push(Array::complex(&shape, out), Op::Unpack(a.0), &[a.0]))
    }

    /// Centered orthonormal 2D DFT over the two trailing axes.
    pub fn fft2c(&mut self, a: Var) -> Result<Var> {
        let v = fft_planes(self.value(a), false)?;
        Ok(self.push(v, Op::Fft(a.0), &[a.0]))
    }

    pub fn ifft2c(&mut self, a: Var) -> Result<Var> {
        let v = fft_planes(self.value(a), true)?;
        Ok(self.push(v, Op::Ifft(a.0), &[a.0]))
    }

    /// `z * m` with a real mask `m` broadcast cyclically over leading entries of `z`.
    pub fn mask_mul(&mut self, z: Var, m: Var) -> Result<Var> {
        let (zv, mv) = (self.value(z), self.value(m));
        let mr = mv.expect_real("mask_mul")?;
        if mr.is_empty() || zv.len() % mr.len() != 0 || !zv.shape.ends_with(&mv.shape) {
            return shape_err("mask_mul", format!("mask {:?} for {:?}", mv.shape, zv.shape));
        }
        let n = mr.len();
        let v = match &zv.data {
            Data::Complex(x) => Array::complex(&zv.shape, x.iter().enumerate().map(|(i, &c)| c * mr[i % n]).collect()),
            Data::Real(x) => Array::real(&zv.shape, x.iter().enumerate().map(|(i, &c)| c * mr[i % n]).collect()),
        };
        Ok(self.push(v, Op::MaskMul(z.0, m.0), &[z.0, m.0]))
    }

    /// `Re <a_j, b_j>` for each entry `j` of the leading axis, shape `[C]`.
    pub fn dot_re(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("dot_re", self.value(a), self.value(b))?;
        let d = slab_dots(self.value(a), self.value(b));
        let c = d.len();
        Ok(self.push(Array::real(&[c], d), Op::DotRe(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).expect_real("sum")?.iter().sum();
        Ok(self.push(Array::scalar(s), Op::Sum(a.0), &[a.0]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a).expect_real("mean")?;
        if x.is_empty() {
            return shape_err("mean", "empty input");
        }
        let s = x.iter().sum::<f64>() / x.len() as f64;
        Ok(self.push(Array::scalar(s), Op::Mean(a.0), &[a.0]))
    }

    /// Mean SSIM over channels of `x` against reference `y` (both `[C,H,W]`, real).
    /// The reference receives no gradient.
    pub fn ssim(&mut self, x: Var, y: Var) -> Result<Var> {
        same_shape("ssim", self.value(x), self.value(y))?;
        let (c, h, w) = chw("ssim", self.value(x))?;
        let s = ssim::ssim_forward(self.value(x).expect_real("ssim")?, self.value(y).expect_real("ssim")?, c, h, w)?;
        Ok(self.push(Array::scalar(s), Op::Ssim(x.0, y.0), &[x.0]))
    }

    pub fn custom(&mut self, mut op: Box<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        let v = {
            let refs: Vec<&Array> = inputs.iter().map(|i| self.value(*i)).collect();
            op.forward(&refs)?
        };
        if !v.all_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let ids: Vec<usize> = inputs.iter().map(|i| i.0).collect();
        Ok(self.push(v, Op::Custom(op, ids.clone()), &ids))
    }

    /// Reverse accumulation from a scalar output seeded with gradient 1.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = self.value(loss);
        if lv.len() != 1 || lv.is_complex() {
            return shape_err("backward", format!("loss must be a real scalar, got {:?}", lv.shape));
        }
        self.backward_with(loss, Array::real(&lv.shape, vec![1.0]))
    }

    /// Reverse accumulation from `out` seeded with an arbitrary upstream gradient.
    pub fn backward_with(&self, out: Var, seed: Array) -> Result<Grads> {
        same_shape("backward", self.value(out), &seed)?;
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (p, pg) in self.node_backward(i, &g)? {
                if !self.nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Grads { grads })
    }

    fn node_backward(&self, i: usize, g: &Array) -> Result<Vec<(usize, Array)>> {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let needs = |j: usize| self.nodes[j].requires_grad;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, map_data(g, |x| -x, |x| -x))],
            Op::Scale(a, s) => vec![(*a, map_data(g, |x| s * x, |x| x * *s))],
            Op::ScaleChannels(x, s) => {
                let sv = val(*s).re();
                let mut out = vec![(*x, scale_slabs(g, sv))];
                if needs(*s) {
                    let d = slab_dots(g, val(*x));
                    let gs = if sv.len() == 1 { vec![d.iter().sum()] } else { d };
                    out.push((*s, Array::real(&val(*s).shape, gs)));
                }
                out
            }
            Op::Mul(a, b) => {
                let gr = g.re();
                let (x, y) = (val(*a).re(), val(*b).re());
                vec![
                    (*a, Array::real(&g.shape, gr.iter().zip(y).map(|(p, q)| p * q).collect())),
                    (*b, Array::real(&g.shape, gr.iter().zip(x).map(|(p, q)| p * q).collect())),
                ]
            }
            Op::Div(a, b) => {
                let gr = g.re();
                let (x, y) = (val(*a).re(), val(*b).re());
                let ga = gr.iter().zip(y).map(|(&p, &q)| if q == 0.0 { 0.0 } else { p / q }).collect();
                let gb = gr.iter().zip(x).zip(y).map(|((&p, &n), &q)| if q == 0.0 { 0.0 } else { -p * n / (q * q) }).collect();
                vec![(*a, Array::real(&g.shape, ga)), (*b, Array::real(&g.shape, gb))]
            }
            Op::Exp(a) => {
                let o = node.value.re();
                vec![(*a, Array::real(&g.shape, g.re().iter().zip(o).map(|(p, q)| p * q).collect()))]
            }
            Op::Relu(a) => {
                let x = val(*a).re();
                vec![(*a, Array::real(&g.shape, g.re().iter().zip(x).map(|(&p, &q)| if q > 0.0 { p } else { 0.0 }).collect()))]
            }
            Op::Conv2d { x, w, b, k } => {
                let (cin, h, wd) = chw("conv2d", val(*x))?;
                let cout = g.shape[0];
                let cg = conv::conv2d_backward(val(*x).re(), val(*w).re(), g.re(), cin, cout, h, wd, *k);
                let mut out = vec![(*x, Array::real(&val(*x).shape, cg.input)), (*w, Array::real(&val(*w).shape, cg.kernel))];
                if let Some(b) = b {
                    out.push((*b, Array::real(&[cout], cg.bias)));
                }
                out
            }
            Op::AvgPool2(a) => {
                let (c, h, w) = chw("avgpool2", val(*a))?;
                vec![(*a, Array::real(&val(*a).shape, avgpool2_backward(g.re(), c, h, w)))]
            }
            Op::Upsample2(a) => {
                let (c, h, w) = chw("upsample2", val(*a))?;
                vec![(*a, Array::real(&val(*a).shape, upsample2_backward(g.re(), c, h, w)))]
            }
            Op::Concat(parts) => {
                let plane = g.plane();
                let mut off = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let n = val(p).shape[0] * plane;
                    let r = off * plane..off * plane + n;
                    out.push((p, match &g.data {
                        Data::Real(x) => Array::real(&val(p).shape, x[r].to_vec()),
                        Data::Complex(x) => Array::complex(&val(p).shape, x[r].to_vec()),
                    }));
                    off += val(p).shape[0];
                }
                out
            }
            Op::Slice { a, start } => {
                let mut full = val(*a).zeros_like();
                let off = start * g.plane();
                match (&mut full.data, &g.data) {
                    (Data::Real(d), Data::Real(s)) => d[off..off + s.len()].copy_from_slice(s),
                    (Data::Complex(d), Data::Complex(s)) => d[off..off + s.len()].copy_from_slice(s),
                    _ => unreachable!(),
                }
                vec![(*a, full)]
            }
            Op::Pack(a) => {
                let plane = val(*a).plane();
                let mut out = Vec::with_capacity(val(*a).len());
                for ch in g.re().chunks(2 * plane) {
                    out.extend(ch[..plane].iter().zip(&ch[plane..]).map(|(&re, &im)| Complex64::new(re, im)));
                }
                vec![(*a, Array::complex(&val(*a).shape, out))]
            }
            Op::Unpack(a) => {
                let plane = g.plane();
                let mut out = Vec::with_capacity(2 * g.len());
                for ch in g.cx().chunks(plane) {
                    out.extend(ch.iter().map(|c| c.re));
                    out.extend(ch.iter().map(|c| c.im));
                }
                vec![(*a, Array::real(&val(*a).shape, out))]
            }
            Op::Fft(a) => vec![(*a, fft_planes(g, true)?)],
            Op::Ifft(a) => vec![(*a, fft_planes(g, false)?)],
            Op::MaskMul(z, m) => {
                let mv = val(*m).re();
                let n = mv.len();
                let mut out = vec![];
                let gz = match &g.data {
                    Data::Complex(x) => Array::complex(&g.shape, x.iter().enumerate().map(|(i, &c)| c * mv[i % n]).collect()),
                    Data::Real(x) => Array::real(&g.shape, x.iter().enumerate().map(|(i, &c)| c * mv[i % n]).collect()),
                };
                out.push((*z, gz));
                if needs(*m) {
                    let mut gm = vec![0.0; n];
                    match (&g.data, &val(*z).data) {
                        (Data::Complex(gg), Data::Complex(zz)) => {
                            for (i, (a, b)) in gg.iter().zip(zz).enumerate() {
                                gm[i % n] += a.re * b.re + a.im * b.im;
                            }
                        }
                        (Data::Real(gg), Data::Real(zz)) => {
                            for (i, (a, b)) in gg.iter().zip(zz).enumerate() {
                                gm[i % n] += a * b;
                            }
                        }
                        _ => unreachable!(),
                    }
                    out.push((*m, Array::real(&val(*m).shape, gm)));
                }
                out
            }
            Op::DotRe(a, b) => {
                let gv = g.re();
                vec![(*a, scale_slabs(val(*b), gv)), (*b, scale_slabs(val(*a), gv))]
            }
            Op::Sum(a) => {
                let s = g.re()[0];
                vec![(*a, Array::real(&val(*a).shape, vec![s; val(*a).len()]))]
            }
            Op::Mean(a) => {
                let n = val(*a).len();
                let s = g.re()[0] / n as f64;
                vec![(*a, Array::real(&val(*a).shape, vec![s; n]))]
            }
            Op::Ssim(x, y) => {
                let (c, h, w) = chw("ssim", val(*x))?;
                let gx = ssim::ssim_backward(val(*x).re(), val(*y).re(), c, h, w, g.re()[0]);
                vec![(*x, Array::real(&val(*x).shape, gx))]
            }
            Op::Custom(op, inputs) => {
                let refs: Vec<&Array> = inputs.iter().map(|&j| val(j)).collect();
                let flags: Vec<bool> = inputs.iter().map(|&j| needs(j)).collect();
                let gs = op.backward(&refs, &node.value, g, &flags);
                let mut out = vec![];
                for (&j, gj) in inputs.iter().zip(gs) {
                    if let Some(gj) = gj {
                        if gj.shape != val(j).shape || gj.is_complex() != val(j).is_complex() {
                            return shape_err(op.name(), format!("gradient {:?} for input {:?}", gj.shape, val(j).shape));
                        }
                        out.push((j, gj));
                    }
                }
                out
            }
        })
    }
}
