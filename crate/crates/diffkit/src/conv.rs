//! Same-padded 2D cross-correlation through im2col and a dense matrix product.

/// `c = alpha * op(a) * op(b) + beta * c` with `op(a)` of shape `m x k`,
/// `op(b)` of shape `k x n`, all row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], trans_a: bool, b: &[f64], trans_b: bool, c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserted lengths cover every index implied by the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Strided `c = a * b + beta * c` with `a: m x k`, `b: k x n`, `c: m x n`
/// given as (row stride, column stride) pairs; every addressed element must
/// lie inside its slice.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
    beta: f64,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(last(m, k, rsa, csa) < a.len() && last(k, n, rsb, csb) < b.len() && last(m, n, rsc, csc) < c.len());
    // SAFETY: the asserted bounds cover every index implied by the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Zero-padded copy of `x: [cin, h, w]` with `p` cells on every side plus a
/// tail so shifted views of the last channel stay in bounds.
struct Padded {
    data: Vec<f64>,
    hp: usize,
    wp: usize,
}

impl Padded {
    fn zeros(cin: usize, h: usize, w: usize, p: usize) -> Self {
        let (hp, wp) = (h + 2 * p, w + 2 * p);
        Self { data: vec![0.0; cin * hp * wp + 2 * p], hp, wp }
    }

    fn from_image(x: &[f64], cin: usize, h: usize, w: usize, p: usize) -> Self {
        let mut out = Self::zeros(cin, h, w, p);
        let plane = out.hp * out.wp;
        for ci in 0..cin {
            for y in 0..h {
                let dst = ci * plane + (y + p) * out.wp + p;
                out.data[dst..dst + w].copy_from_slice(&x[(ci * h + y) * w..][..w]);
            }
        }
        out
    }

    fn plane(&self) -> usize {
        self.hp * self.wp
    }
}

/// Forward pass; `x: [cin, h, w]`, `kernel: [cout, cin, k, k]`, `bias: [cout]`.
///
/// Each kernel tap is one matrix product against a shifted view of the padded
/// input; outputs are computed on rows of padded width and cropped.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(x: &[f64], kernel: &[f64], bias: Option<&[f64]>, cin: usize, cout: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let hw = h * w;
    if k == 1 {
        let mut out = vec![0.0; cout * hw];
        if let Some(b) = bias {
            for (o, &bv) in b.iter().enumerate() {
                out[o * hw..(o + 1) * hw].fill(bv);
            }
        }
        gemm(cout, cin, hw, kernel, false, x, false, &mut out, 1.0);
        return out;
    }
    let p = k / 2;
    let xp = Padded::from_image(x, cin, h, w, p);
    let (wp, plane, kk) = (xp.wp, xp.plane(), k * k);
    let n = h * wp;
    let mut wide = vec![0.0; cout * n];
    for dy in 0..k {
        for dx in 0..k {
            let tap = dy * k + dx;
            gemm_strided(cout, cin, n, &kernel[tap..], (cin * kk, kk), &xp.data[dy * wp + dx..], (plane, 1), &mut wide, (n, 1), 1.0);
        }
    }
    let mut out = vec![0.0; cout * hw];
    for o in 0..cout {
        let b = bias.map_or(0.0, |b| b[o]);
        for y in 0..h {
            for (d, s) in out[(o * h + y) * w..][..w].iter_mut().zip(&wide[o * n + y * wp..][..w]) {
                *d = s + b;
            }
        }
    }
    out
}

pub struct ConvGrads {
    pub input: Vec<f64>,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(x: &[f64], kernel: &[f64], grad: &[f64], cin: usize, cout: usize, h: usize, w: usize, k: usize) -> ConvGrads {
    let hw = h * w;
    let kk = k * k;
    let bias: Vec<f64> = (0..cout).map(|o| grad[o * hw..(o + 1) * hw].iter().sum()).collect();
    let mut gk = vec![0.0; cout * cin * kk];
    if k == 1 {
        gemm(cout, hw, cin, grad, false, x, true, &mut gk, 0.0);
        let mut gx = vec![0.0; cin * hw];
        gemm(cin, cout, hw, kernel, true, grad, false, &mut gx, 0.0);
        return ConvGrads { input: gx, kernel: gk, bias };
    }
    let p = k / 2;
    let xp = Padded::from_image(x, cin, h, w, p);
    let (wp, plane) = (xp.wp, xp.plane());
    let n = h * wp;
    // output gradient on padded-width rows, zero in the cropped columns
    let mut gw = vec![0.0; cout * n];
    for o in 0..cout {
        for y in 0..h {
            gw[o * n + y * wp..][..w].copy_from_slice(&grad[(o * h + y) * w..][..w]);
        }
    }
    let mut tap_grad = vec![0.0; cout * cin];
    for dy in 0..k {
        for dx in 0..k {
            let tap = dy * k + dx;
            // [cin, cout] = shifted input times the transposed output gradient
            gemm_strided(cin, n, cout, &xp.data[dy * wp + dx..], (plane, 1), &gw, (1, n), &mut tap_grad, (cout, 1), 0.0);
            for o in 0..cout {
                for ci in 0..cin {
                    gk[(o * cin + ci) * kk + tap] = tap_grad[ci * cout + o];
                }
            }
        }
    }
    // same-padded correlation adjoint: correlate with the flipped, transposed kernel
    let mut flipped = vec![0.0; cin * cout * kk];
    for o in 0..cout {
        for ci in 0..cin {
            for t in 0..kk {
                flipped[(ci * cout + o) * kk + kk - 1 - t] = kernel[(o * cin + ci) * kk + t];
            }
        }
    }
    let input = conv2d_forward(grad, &flipped, None, cout, cin, h, w, k);
    ConvGrads { input, kernel: gk, bias }
}

/// Direct nested-loop reference used to validate the fast path.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_direct(x: &[f64], kernel: &[f64], bias: Option<&[f64]>, cin: usize, cout: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let p = (k / 2) as isize;
    let mut out = vec![0.0; cout * h * w];
    for o in 0..cout {
        for y in 0..h {
            for xx in 0..w {
                let mut s = bias.map_or(0.0, |b| b[o]);
                for ci in 0..cin {
                    for dy in 0..k {
                        for dx in 0..k {
                            let sy = y as isize + dy as isize - p;
                            let sx = xx as isize + dx as isize - p;
                            if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                s += kernel[((o * cin + ci) * k + dy) * k + dx] * x[(ci * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                }
                out[(o * h + y) * w + xx] = s;
            }
        }
    }
    out
}
