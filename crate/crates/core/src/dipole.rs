//! Unit dipole kernel and FFT-based dipole convolution on periodic grids.

use num_complex::Complex64;

use crate::fft::{fftn, freq_index, ifftn};
use crate::volume::Dims3;

/// `D(k) = 1/3 - (k.b)^2 / |k|^2` on the unshifted frequency grid, `D(0) = 0`.
pub fn dipole_kernel(dims: Dims3, voxel_size: [f64; 3], b0_dir: [f64; 3]) -> Vec<f64> {
    let [nx, ny, nz] = dims.as_array();
    let mut out = Vec::with_capacity(dims.len());
    for ix in 0..nx {
        let kx = freq_index(ix, nx) / (nx as f64 * voxel_size[0]);
        for iy in 0..ny {
            let ky = freq_index(iy, ny) / (ny as f64 * voxel_size[1]);
            for iz in 0..nz {
                let kz = freq_index(iz, nz) / (nz as f64 * voxel_size[2]);
                let k2 = kx * kx + ky * ky + kz * kz;
                if k2 == 0.0 {
                    out.push(0.0);
                } else {
                    let kb = kx * b0_dir[0] + ky * b0_dir[1] + kz * b0_dir[2];
                    out.push(1.0 / 3.0 - kb * kb / k2);
                }
            }
        }
    }
    out
}

/// Multiply the spectrum of a real volume by a real kernel and return the real part.
pub fn convolve_real(input: &[f64], kernel: &[f64], dims: Dims3) -> Vec<f64> {
    let mut buf: Vec<Complex64> = input.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let d = dims.as_array();
    fftn(&mut buf, &d);
    for (b, k) in buf.iter_mut().zip(kernel) {
        *b *= *k;
    }
    ifftn(&mut buf, &d);
    buf.iter().map(|c| c.re).collect()
}
