//! Dense N-dimensional FFTs over row-major buffers.
//!
//! `fftc`/`ifftc` are centered (DC at index `n / 2` on every axis) and
//! orthonormal, which is the k-space convention used everywhere in this crate.
//! `fftn`/`ifftn` are the plain, unshifted transforms used for convolution
//! kernels (dipole, smoothing); `ifftn` is normalized by `1 / N`.

use std::cell::RefCell;

use num_complex::Complex64;
use rustfft::FftPlanner;

type Buffers = (Vec<Complex64>, Vec<Complex64>);

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
    static BUFFERS: RefCell<Buffers> = const { RefCell::new((Vec::new(), Vec::new())) };
}

fn transform_axis(data: &mut [Complex64], dims: &[usize], axis: usize, forward: bool) {
    let n = dims[axis];
    if n <= 1 {
        return;
    }
    let stride: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let fft = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if forward {
            p.plan_fft_forward(n)
        } else {
            p.plan_fft_inverse(n)
        }
    });
    BUFFERS.with(|b| {
        let (block, scratch) = &mut *b.borrow_mut();
        let zero = Complex64::new(0.0, 0.0);
        if scratch.len() < fft.get_inplace_scratch_len() {
            scratch.resize(fft.get_inplace_scratch_len(), zero);
        }
        let scratch = &mut scratch[..fft.get_inplace_scratch_len()];
        if stride == 1 {
            fft.process_with_scratch(data, scratch);
            return;
        }
        // transpose each [n, stride] block so every line is contiguous, batch, transpose back
        if block.len() < n * stride {
            block.resize(n * stride, zero);
        }
        let block = &mut block[..n * stride];
        for o in 0..outer {
            let src = &mut data[o * n * stride..(o + 1) * n * stride];
            transpose(src, block, n, stride);
            fft.process_with_scratch(block, scratch);
            transpose(block, src, stride, n);
        }
    });
}

/// `dst[c * rows + r] = src[r * cols + c]`, in tiles.
fn transpose(src: &[Complex64], dst: &mut [Complex64], rows: usize, cols: usize) {
    const T: usize = 16;
    assert!(src.len() >= rows * cols && dst.len() >= rows * cols);
    for r0 in (0..rows).step_by(T) {
        for c0 in (0..cols).step_by(T) {
            let c1 = (c0 + T).min(cols);
            for r in r0..(r0 + T).min(rows) {
                let line = &src[r * cols + c0..r * cols + c1];
                for (i, v) in line.iter().enumerate() {
                    // SAFETY: (c0 + i) < cols and r < rows, so the index is below rows * cols.
                    unsafe { *dst.get_unchecked_mut((c0 + i) * rows + r) = *v };
                }
            }
        }
    }
}

/// Rotate every axis by `shift(n)` positions to the right.
fn roll(data: &mut [Complex64], dims: &[usize], shift: impl Fn(usize) -> usize) {
    let mut buf = vec![Complex64::new(0.0, 0.0); data.len()];
    for axis in 0..dims.len() {
        let n = dims[axis];
        let k = shift(n) % n.max(1);
        if n <= 1 || k == 0 {
            continue;
        }
        let stride: usize = dims[axis + 1..].iter().product();
        let outer: usize = dims[..axis].iter().product();
        for o in 0..outer {
            let base = o * n * stride;
            for i in 0..n {
                let j = (i + k) % n;
                let src = base + i * stride;
                let dst = base + j * stride;
                buf[dst..dst + stride].copy_from_slice(&data[src..src + stride]);
            }
        }
        data.copy_from_slice(&buf);
    }
}

pub fn fftshift(data: &mut [Complex64], dims: &[usize]) {
    roll(data, dims, |n| n / 2);
}

pub fn ifftshift(data: &mut [Complex64], dims: &[usize]) {
    roll(data, dims, |n| n - n / 2);
}

/// Unnormalized forward transform over every axis.
pub fn fftn(data: &mut [Complex64], dims: &[usize]) {
    debug_assert_eq!(data.len(), dims.iter().product::<usize>());
    for axis in 0..dims.len() {
        transform_axis(data, dims, axis, true);
    }
}

/// Inverse transform over every axis, scaled by `1 / N`.
pub fn ifftn(data: &mut [Complex64], dims: &[usize]) {
    debug_assert_eq!(data.len(), dims.iter().product::<usize>());
    for axis in 0..dims.len() {
        transform_axis(data, dims, axis, false);
    }
    let scale = 1.0 / data.len() as f64;
    data.iter_mut().for_each(|v| *v *= scale);
}

/// Centered orthonormal forward transform.
pub fn fftc(data: &mut [Complex64], dims: &[usize]) {
    centered(data, dims, true);
}

/// Centered orthonormal inverse transform.
pub fn ifftc(data: &mut [Complex64], dims: &[usize]) {
    centered(data, dims, false);
}

fn centered(data: &mut [Complex64], dims: &[usize], forward: bool) {
    if dims.iter().all(|&n| n % 2 == 0) {
        centered_modulated(data, dims, forward);
    } else {
        centered_shifted(data, dims, forward);
    }
}

fn centered_shifted(data: &mut [Complex64], dims: &[usize], forward: bool) {
    ifftshift(data, dims);
    for axis in 0..dims.len() {
        transform_axis(data, dims, axis, forward);
    }
    fftshift(data, dims);
    let scale = 1.0 / (data.len() as f64).sqrt();
    data.iter_mut().for_each(|v| *v *= scale);
}

/// For even lengths a half-length roll equals multiplication by `(-1)^i` on
/// each side of the transform, up to a global sign `(-1)^(n/2)` per axis.
fn centered_modulated(data: &mut [Complex64], dims: &[usize], forward: bool) {
    let half_sum: usize = dims.iter().map(|n| n / 2).sum();
    let sign = if half_sum % 2 == 0 { 1.0 } else { -1.0 };
    let scale = 1.0 / (data.len() as f64).sqrt();
    checkerboard(data, dims, 1.0);
    for axis in 0..dims.len() {
        transform_axis(data, dims, axis, forward);
    }
    checkerboard(data, dims, sign * scale);
}

fn checkerboard(data: &mut [Complex64], dims: &[usize], scale: f64) {
    let last = *dims.last().unwrap_or(&1);
    if last == 0 {
        return;
    }
    let outer = &dims[..dims.len() - 1];
    for (row, line) in data.chunks_mut(last).enumerate() {
        // parity of the leading coordinates of this row
        let (mut r, mut parity) = (row, 0);
        for &n in outer.iter().rev() {
            parity += r % n;
            r /= n;
        }
        let s = if parity % 2 == 0 { scale } else { -scale };
        for pair in line.chunks_exact_mut(2) {
            pair[0] *= s;
            pair[1] *= -s;
        }
    }
}

pub fn fft2c(data: &mut [Complex64], ny: usize, nz: usize) {
    fftc(data, &[ny, nz]);
}

pub fn ifft2c(data: &mut [Complex64], ny: usize, nz: usize) {
    ifftc(data, &[ny, nz]);
}

/// Signed integer frequency index of bin `i` for an unshifted axis of length `n`.
pub fn freq_index(i: usize, n: usize) -> f64 {
    if i < n.div_ceil(2) {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(n: usize, seed: u64) -> Vec<Complex64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let a = (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let b = (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
                Complex64::new(a, b)
            })
            .collect()
    }

    #[test]
    fn centered_round_trip_odd_and_even() {
        for dims in [vec![8, 6], vec![5, 7], vec![3, 4, 5]] {
            let n = dims.iter().product();
            let x = random(n, 3);
            let mut y = x.clone();
            fftc(&mut y, &dims);
            ifftc(&mut y, &dims);
            for (a, b) in x.iter().zip(&y) {
                assert!((a - b).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn modulated_path_matches_explicit_shifts() {
        for dims in [vec![8, 6], vec![64, 64], vec![4, 2, 6], vec![2, 10]] {
            let n = dims.iter().product();
            let x = random(n, 5);
            for forward in [true, false] {
                let (mut a, mut b) = (x.clone(), x.clone());
                centered_modulated(&mut a, &dims, forward);
                centered_shifted(&mut b, &dims, forward);
                assert!(a.iter().zip(&b).all(|(p, q)| (p - q).norm() < 1e-12), "{dims:?} {forward}");
            }
        }
    }

    #[test]
    fn constant_maps_to_center_bin() {
        for (ny, nz) in [(8, 8), (7, 5)] {
            let mut x = vec![Complex64::new(2.0, 0.0); ny * nz];
            fft2c(&mut x, ny, nz);
            let center = (ny / 2) * nz + nz / 2;
            for (i, v) in x.iter().enumerate() {
                if i == center {
                    assert!((v.re - 2.0 * ((ny * nz) as f64).sqrt()).abs() < 1e-10);
                } else {
                    assert!(v.norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn unshifted_inverse_is_normalized() {
        let dims = [4, 6, 3];
        let x = random(72, 9);
        let mut y = x.clone();
        fftn(&mut y, &dims);
        ifftn(&mut y, &dims);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).norm() < 1e-12);
        }
    }
}
