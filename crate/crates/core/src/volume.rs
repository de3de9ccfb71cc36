use serde::{Deserialize, Serialize};

/// Row-major 3D grid shape `(nx, ny, nz)`; `x` is the fully sampled readout
/// axis and every `x` index is an independent `ny x nz` phase-encode slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims3 {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims3 {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self { nx, ny, nz }
    }

    pub const fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn slice_len(&self) -> usize {
        self.ny * self.nz
    }

    pub const fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    #[inline]
    pub const fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.ny + iy) * self.nz + iz
    }

    /// Inverse of [`Dims3::index`].
    #[inline]
    pub const fn coords(&self, i: usize) -> (usize, usize, usize) {
        let iz = i % self.nz;
        let iy = (i / self.nz) % self.ny;
        (i / (self.ny * self.nz), iy, iz)
    }

    pub fn slice_range(&self, ix: usize) -> std::ops::Range<usize> {
        let n = self.slice_len();
        ix * n..(ix + 1) * n
    }
}

/// Stack equally-sized `ny x nz` slices into one volume.
pub fn stack_slices<T: Clone>(slices: &[Vec<T>]) -> Vec<T> {
    slices.iter().flat_map(|s| s.iter().cloned()).collect()
}
