//! Synthetic head phantoms, coil sensitivities and the susceptibility-induced field.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dipole::{convolve_real, dipole_kernel};
use crate::error::{Error, Result};
use crate::volume::Dims3;

/// Hz per ppm at 3 T (42.58 MHz/T).
pub const DEFAULT_FIELD_SCALE_HZ_PER_PPM: f64 = 127.74;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TissueRole {
    WhiteMatter,
    GrayMatter,
    Csf,
    DeepGray,
    Other,
}

/// Relaxation and susceptibility of one tissue class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueParams {
    pub t1_ms: f64,
    pub t2_ms: f64,
    pub t2s_ms: f64,
    pub m0: f64,
    pub chi_ppm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TissueClass {
    pub name: String,
    pub label: u8,
    pub role: TissueRole,
    #[serde(flatten)]
    pub params: TissueParams,
}

impl TissueClass {
    pub fn new(name: &str, label: u8, role: TissueRole, params: TissueParams) -> Self {
        Self { name: name.to_string(), label, role, params }
    }

    fn validate(&self) -> Result<()> {
        let p = &self.params;
        let fail = |msg: &str| Err(Error::Config(format!("class `{}`: {msg}", self.name)));
        if self.label == 0 {
            return fail("label 0 is reserved for background");
        }
        let all = [p.t1_ms, p.t2_ms, p.t2s_ms, p.m0, p.chi_ppm];
        if all.iter().any(|v| !v.is_finite()) {
            return fail("non-finite parameter");
        }
        if !(p.t2s_ms > 0.0 && p.t2s_ms <= p.t2_ms) {
            return fail("requires 0 < T2* <= T2");
        }
        if p.t1_ms <= p.t2_ms {
            return fail("requires T1 > T2");
        }
        if p.m0 < 0.0 {
            return fail("negative M0");
        }
        Ok(())
    }
}

/// Default class table: WM/GM/CSF relaxation from the reference sequence
/// simulation, the remaining values are declared configuration.
pub fn default_classes() -> Vec<TissueClass> {
    use TissueRole::*;
    let p = |t1_ms, t2_ms, t2s_ms, chi_ppm| TissueParams { t1_ms, t2_ms, t2s_ms, m0: 1.0, chi_ppm };
    vec![
        TissueClass::new("wm", 1, WhiteMatter, p(855.0, 67.0, 50.0, -0.03)),
        TissueClass::new("gm", 2, GrayMatter, p(1264.0, 89.0, 60.0, 0.02)),
        TissueClass::new("csf", 3, Csf, p(4000.0, 2000.0, 500.0, 0.0)),
        TissueClass::new("deep_gray", 4, DeepGray, p(1100.0, 60.0, 30.0, 0.10)),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    /// Ellipsoidal brain slab: GM rim, WM core, two CSF ventricles, two deep-gray blobs,
    /// plus susceptibility sources outside the brain.
    Head,
    /// Every voxel belongs to the first class.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: Dims3,
    pub voxel_size: [f64; 3],
    pub b0_dir: [f64; 3],
    pub seed: u64,
    pub geometry: Geometry,
    pub classes: Vec<TissueClass>,
    pub field_scale_hz_per_ppm: f64,
    /// Susceptibility of the non-signal sources placed outside the brain.
    pub exterior_chi_ppm: f64,
    pub n_exterior_sources: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: Dims3::new(16, 64, 64),
            voxel_size: [1.0, 1.0, 1.0],
            b0_dir: [0.0, 0.0, 1.0],
            seed: 1,
            geometry: Geometry::Head,
            classes: default_classes(),
            field_scale_hz_per_ppm: DEFAULT_FIELD_SCALE_HZ_PER_PPM,
            exterior_chi_ppm: 1.5,
            n_exterior_sources: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TissuePhantom {
    pub dims: Dims3,
    pub voxel_size: [f64; 3],
    pub b0_dir: [f64; 3],
    pub seed: u64,
    pub field_scale_hz_per_ppm: f64,
    pub classes: Vec<TissueClass>,
    pub labels: Vec<u8>,
    pub brain_mask: Vec<bool>,
    /// Susceptibility of sources outside the brain (zero inside).
    pub exterior_chi: Vec<f64>,
}

/// One ROI: a tissue label restricted to one hemisphere (`y` half).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub id: u16,
    pub name: String,
    pub label: u8,
}

impl TissuePhantom {
    pub fn class(&self, label: u8) -> Option<&TissueClass> {
        self.classes.iter().find(|c| c.label == label)
    }

    pub fn class_by_role(&self, role: TissueRole) -> Option<&TissueClass> {
        self.classes.iter().find(|c| c.role == role)
    }

    fn map_param(&self, f: impl Fn(&TissueParams) -> f64) -> Vec<f64> {
        let mut table = [0.0; 256];
        for c in &self.classes {
            table[c.label as usize] = f(&c.params);
        }
        self.labels.iter().map(|&l| table[l as usize]).collect()
    }

    /// Total susceptibility: tissue classes plus exterior sources.
    pub fn chi_map(&self) -> Vec<f64> {
        let mut chi = self.map_param(|p| p.chi_ppm);
        for (c, e) in chi.iter_mut().zip(&self.exterior_chi) {
            *c += e;
        }
        chi
    }

    pub fn tissue_map(&self, f: impl Fn(&TissueParams) -> f64) -> Vec<f64> {
        self.map_param(f)
    }

    /// Region id grid (0 = no region) splitting every tissue label into left/right halves.
    pub fn regions(&self) -> (Vec<u16>, Vec<Region>) {
        let mut regions = Vec::new();
        for c in &self.classes {
            for (h, side) in ["left", "right"].iter().enumerate() {
                regions.push(Region {
                    id: (c.label as u16) * 2 + h as u16,
                    name: format!("{}_{side}", c.name),
                    label: c.label,
                });
            }
        }
        let ny = self.dims.ny;
        let grid = self
            .labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                if l == 0 || !self.brain_mask[i] {
                    return 0;
                }
                let (_, iy, _) = self.dims.coords(i);
                let half = if 2 * iy < ny { 0 } else { 1 };
                l as u16 * 2 + half
            })
            .collect();
        (grid, regions)
    }
}

fn validate_spec(spec: &PhantomSpec) -> Result<()> {
    let [nx, ny, nz] = spec.dims.as_array();
    if nx < 16 || ny < 16 || nz < 16 {
        return Err(Error::Dims(format!("phantom needs >= 16 voxels per axis, got {nx}x{ny}x{nz}")));
    }
    if spec.classes.is_empty() {
        return Err(Error::Config("class table is empty".into()));
    }
    let mut seen = [false; 256];
    for c in &spec.classes {
        c.validate()?;
        if seen[c.label as usize] {
            return Err(Error::Config(format!("duplicate label {}", c.label)));
        }
        seen[c.label as usize] = true;
    }
    let n = spec.b0_dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (n - 1.0).abs() > 1e-12 {
        return Err(Error::Config(format!("B0 direction must have unit norm, got {n}")));
    }
    if spec.voxel_size.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Config("voxel sizes must be positive".into()));
    }
    if spec.geometry == Geometry::Head {
        for role in [TissueRole::WhiteMatter, TissueRole::GrayMatter, TissueRole::Csf, TissueRole::DeepGray] {
            if !spec.classes.iter().any(|c| c.role == role) {
                return Err(Error::Config(format!("head geometry needs a {role:?} class")));
            }
        }
    }
    Ok(())
}

struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
}

impl Ellipsoid {
    fn r2(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.semi[a]).powi(2)).sum()
    }
}

pub fn make_phantom(spec: &PhantomSpec) -> Result<TissuePhantom> {
    validate_spec(spec)?;
    let dims = spec.dims;
    let mut labels = vec![0u8; dims.len()];
    let mut exterior_chi = vec![0.0; dims.len()];

    match spec.geometry {
        Geometry::Uniform => labels.fill(spec.classes[0].label),
        Geometry::Head => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let label_of = |role| spec.classes.iter().find(|c| c.role == role).map(|c| c.label).unwrap();
            let (wm, gm, csf, dgm) = (
                label_of(TissueRole::WhiteMatter),
                label_of(TissueRole::GrayMatter),
                label_of(TissueRole::Csf),
                label_of(TissueRole::DeepGray),
            );
            let [nx, ny, nz] = dims.as_array().map(|n| n as f64);
            let c = [nx / 2.0, ny / 2.0, nz / 2.0];
            let mut jitter = |s: f64| rng.random_range(-s..=s);
            // The brain extends past the slab ends along x so every slice carries tissue.
            let brain = Ellipsoid {
                center: [c[0] + jitter(0.5), c[1] + jitter(0.8), c[2] + jitter(0.8)],
                semi: [1.6 * nx / 2.0, (0.84 + jitter(0.02)) * ny / 2.0, (0.78 + jitter(0.02)) * nz / 2.0],
            };
            let by = brain.semi[1];
            let bz = brain.semi[2];
            let ventricles: Vec<Ellipsoid> = [-1.0, 1.0]
                .iter()
                .map(|s| Ellipsoid {
                    center: [c[0], brain.center[1] + s * 0.12 * by, brain.center[2] + (0.22 + jitter(0.03)) * bz],
                    semi: [0.35 * nx, 0.07 * by, 0.22 * bz],
                })
                .collect();
            let blob_r = (0.16 * by).max(3.0);
            let blobs: Vec<Ellipsoid> = [-1.0, 1.0]
                .iter()
                .map(|s| Ellipsoid {
                    center: [
                        c[0] + jitter(1.0),
                        brain.center[1] + s * (0.46 + jitter(0.04)) * by,
                        brain.center[2] + (-0.08 + jitter(0.06)) * bz,
                    ],
                    semi: [blob_r.min(0.4 * nx), blob_r, blob_r],
                })
                .collect();
            let sources: Vec<(Ellipsoid, f64)> = (0..spec.n_exterior_sources)
                .map(|k| {
                    let ang = std::f64::consts::FRAC_PI_4
                        + std::f64::consts::PI * k as f64
                        + std::f64::consts::FRAC_PI_2 * (k / 2) as f64
                        + jitter(0.1);
                    let rad = 0.82 * c[1].min(c[2]);
                    let r = (0.1 * ny.min(nz)).max(2.0);
                    let e = Ellipsoid {
                        center: [c[0], c[1] + rad * ang.cos(), c[2] + rad * ang.sin()],
                        semi: [r.min(0.4 * nx), r, r],
                    };
                    (e, spec.exterior_chi_ppm)
                })
                .collect();

            for i in 0..dims.len() {
                let (ix, iy, iz) = dims.coords(i);
                let p = [ix as f64 + 0.5, iy as f64 + 0.5, iz as f64 + 0.5];
                let r2 = brain.r2(p);
                if r2 > 1.0 {
                    for (e, chi) in &sources {
                        if e.r2(p) <= 1.0 {
                            exterior_chi[i] += chi;
                        }
                    }
                    continue;
                }
                labels[i] = if blobs.iter().any(|b| b.r2(p) <= 1.0) {
                    dgm
                } else if ventricles.iter().any(|v| v.r2(p) <= 1.0) {
                    csf
                } else if r2 > 0.82 * 0.82 {
                    gm
                } else {
                    wm
                };
            }
        }
    }

    let brain_mask = labels.iter().map(|&l| l != 0).collect();
    Ok(TissuePhantom {
        dims,
        voxel_size: spec.voxel_size,
        b0_dir: spec.b0_dir,
        seed: spec.seed,
        field_scale_hz_per_ppm: spec.field_scale_hz_per_ppm,
        classes: spec.classes.clone(),
        labels,
        brain_mask,
        exterior_chi,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoilProfile {
    /// Complex Gaussians centered on a ring around the phase-encode FOV.
    Gaussian,
    /// Unit sensitivity everywhere.
    Flat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoilSet {
    pub dims: Dims3,
    pub maps: Vec<Vec<Complex64>>,
}

impl CoilSet {
    pub fn n_coils(&self) -> usize {
        self.maps.len()
    }

    pub fn rss(&self) -> Vec<f64> {
        (0..self.dims.len())
            .map(|i| self.maps.iter().map(|m| m[i].norm_sqr()).sum::<f64>().sqrt())
            .collect()
    }

    /// Scale every voxel so the root-sum-of-squares is one.
    pub fn normalize_rss(&mut self) {
        let rss = self.rss();
        for m in &mut self.maps {
            for (v, r) in m.iter_mut().zip(&rss) {
                *v /= *r;
            }
        }
    }

    /// Sensitivities of a single `ny x nz` slice.
    pub fn slice(&self, ix: usize) -> CoilSet {
        let r = self.dims.slice_range(ix);
        CoilSet {
            dims: Dims3::new(1, self.dims.ny, self.dims.nz),
            maps: self.maps.iter().map(|m| m[r.clone()].to_vec()).collect(),
        }
    }
}

pub fn synthesize_coils(dims: Dims3, n_coils: usize, seed: u64, profile: CoilProfile) -> Result<CoilSet> {
    if n_coils == 0 {
        return Err(Error::Config("n_coils must be >= 1".into()));
    }
    if dims.is_empty() {
        return Err(Error::Dims("empty coil grid".into()));
    }
    if profile == CoilProfile::Flat {
        return Ok(CoilSet { dims, maps: vec![vec![Complex64::new(1.0, 0.0); dims.len()]; n_coils] });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [nx, ny, nz] = dims.as_array().map(|n| n as f64);
    let fov = ny.max(nz);
    let ring = 0.6 * fov;
    let sigma = 0.45 * fov;
    let maps = (0..n_coils)
        .map(|c| {
            let ang = 2.0 * std::f64::consts::PI * c as f64 / n_coils as f64 + rng.random_range(-0.2..0.2);
            let cx = nx / 2.0 + rng.random_range(-0.1..0.1) * nx;
            let cy = ny / 2.0 + ring * ang.cos();
            let cz = nz / 2.0 + ring * ang.sin();
            let phase0 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let gy = rng.random_range(-1.5..1.5) / fov;
            let gz = rng.random_range(-1.5..1.5) / fov;
            (0..dims.len())
                .map(|i| {
                    let (ix, iy, iz) = dims.coords(i);
                    let (x, y, z) = (ix as f64 + 0.5, iy as f64 + 0.5, iz as f64 + 0.5);
                    let d2 = (x - cx).powi(2) + (y - cy).powi(2) + (z - cz).powi(2);
                    let mag = (-d2 / (2.0 * sigma * sigma)).exp();
                    let ph = phase0 + gy * (y - ny / 2.0) + gz * (z - nz / 2.0);
                    Complex64::from_polar(mag, ph)
                })
                .collect()
        })
        .collect();
    Ok(CoilSet { dims, maps })
}

/// Field (Hz) induced by a susceptibility distribution (ppm) via the unit dipole kernel.
pub fn susceptibility_to_field(
    chi: &[f64],
    dims: Dims3,
    voxel_size: [f64; 3],
    b0_dir: [f64; 3],
    scale_hz_per_ppm: f64,
) -> Result<Vec<f64>> {
    if chi.len() != dims.len() {
        return Err(Error::LengthMismatch(chi.len(), dims.len()));
    }
    if chi.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("susceptibility map"));
    }
    let kernel = dipole_kernel(dims, voxel_size, b0_dir);
    let mut field = convolve_real(chi, &kernel, dims);
    field.iter_mut().for_each(|f| *f *= scale_hz_per_ppm);
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> PhantomSpec {
        PhantomSpec { dims: Dims3::new(16, 32, 32), ..Default::default() }
    }

    #[test]
    fn class_table_echoes_reference_relaxation() {
        let ph = make_phantom(&spec()).unwrap();
        let wm = ph.class_by_role(TissueRole::WhiteMatter).unwrap().params;
        let gm = ph.class_by_role(TissueRole::GrayMatter).unwrap().params;
        let csf = ph.class_by_role(TissueRole::Csf).unwrap().params;
        assert_eq!((wm.t1_ms, wm.t2_ms), (855.0, 67.0));
        assert_eq!((gm.t1_ms, gm.t2_ms), (1264.0, 89.0));
        assert_eq!((csf.t1_ms, csf.t2_ms), (4000.0, 2000.0));
    }

    #[test]
    fn head_contains_all_regions() {
        let ph = make_phantom(&spec()).unwrap();
        for l in 1..=4u8 {
            let n = ph.labels.iter().filter(|&&x| x == l).count();
            assert!(n > 10, "label {l} has {n} voxels");
        }
        let (grid, regions) = ph.regions();
        for r in regions.iter().filter(|r| r.label == 4) {
            assert!(grid.iter().filter(|&&g| g == r.id).count() > 10, "{}", r.name);
        }
        // brain mask excludes background
        assert!(ph.brain_mask.iter().zip(&ph.labels).all(|(&m, &l)| m == (l != 0)));
        assert!(ph.brain_mask.iter().any(|m| !m));
        // exterior sources sit outside the brain
        assert!(ph.exterior_chi.iter().zip(&ph.brain_mask).all(|(&e, &m)| e == 0.0 || !m));
        assert!(ph.exterior_chi.iter().any(|&e| e != 0.0));
    }

    #[test]
    fn deterministic_for_seed() {
        let a = make_phantom(&spec()).unwrap();
        let b = make_phantom(&spec()).unwrap();
        assert_eq!(a, b);
        let c = make_phantom(&PhantomSpec { seed: 2, ..spec() }).unwrap();
        assert_ne!(a.labels, c.labels);
    }

    #[test]
    fn uniform_geometry() {
        let s = PhantomSpec { geometry: Geometry::Uniform, classes: vec![default_classes()[0].clone()], ..spec() };
        let ph = make_phantom(&s).unwrap();
        assert!(ph.labels.iter().all(|&l| l == 1));
        assert!(ph.brain_mask.iter().all(|&m| m));
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(matches!(make_phantom(&PhantomSpec { dims: Dims3::new(8, 32, 32), ..spec() }), Err(Error::Dims(_))));
        assert!(make_phantom(&PhantomSpec { classes: vec![], ..spec() }).is_err());
        let mut bad = default_classes();
        bad[0].params.t2s_ms = 80.0; // T2* > T2
        assert!(make_phantom(&PhantomSpec { classes: bad, ..spec() }).is_err());
        let missing: Vec<_> = default_classes().into_iter().take(3).collect();
        assert!(make_phantom(&PhantomSpec { classes: missing, ..spec() }).is_err());
    }

    #[test]
    fn coils() {
        let dims = Dims3::new(1, 64, 64);
        let flat = synthesize_coils(dims, 1, 0, CoilProfile::Flat).unwrap();
        assert!(flat.maps[0].iter().all(|v| *v == Complex64::new(1.0, 0.0)));
        let c = synthesize_coils(dims, 8, 5, CoilProfile::Gaussian).unwrap();
        assert_eq!(c.n_coils(), 8);
        let rss = c.rss();
        assert!(rss.iter().cloned().fold(f64::INFINITY, f64::min) > 0.0);
        for a in 0..8 {
            for b in a + 1..8 {
                let d: f64 = c.maps[a].iter().zip(&c.maps[b]).map(|(x, y)| (x - y).norm()).sum();
                assert!(d > 1.0);
            }
            // smooth: neighbouring voxels differ by a small fraction of the peak
            let peak = c.maps[a].iter().map(|v| v.norm()).fold(0.0, f64::max);
            for iy in 0..64 {
                for iz in 0..63 {
                    let i = dims.index(0, iy, iz);
                    assert!((c.maps[a][i] - c.maps[a][i + 1]).norm() < 0.1 * peak);
                }
            }
        }
        assert_eq!(c, synthesize_coils(dims, 8, 5, CoilProfile::Gaussian).unwrap());
        assert!(synthesize_coils(dims, 0, 5, CoilProfile::Gaussian).is_err());
        let mut n = c.clone();
        n.normalize_rss();
        assert!(n.rss().iter().all(|r| (r - 1.0).abs() < 1e-12));
    }

    #[test]
    fn field_of_zero_and_axis_frequency() {
        let dims = Dims3::new(8, 8, 8);
        let f = susceptibility_to_field(&vec![0.0; 512], dims, [1.0; 3], [0.0, 0.0, 1.0], 127.74).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
        // cos along z only: D = 1/3 - 1 = -2/3
        let chi: Vec<f64> = (0..512)
            .map(|i| {
                let (_, _, iz) = dims.coords(i);
                (2.0 * std::f64::consts::PI * iz as f64 / 8.0).cos()
            })
            .collect();
        let f = susceptibility_to_field(&chi, dims, [1.0; 3], [0.0, 0.0, 1.0], 127.74).unwrap();
        for (a, b) in f.iter().zip(&chi) {
            assert!((a - (-2.0 / 3.0) * 127.74 * b).abs() < 1e-10);
        }
        let mut bad = chi.clone();
        bad[3] = f64::NAN;
        assert!(susceptibility_to_field(&bad, dims, [1.0; 3], [0.0, 0.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn field_is_linear() {
        let dims = Dims3::new(8, 8, 8);
        let a: Vec<f64> = (0..512).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.1).collect();
        let b: Vec<f64> = (0..512).map(|i| ((i * 13 % 7) as f64 - 3.0) * 0.2).collect();
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 2.0 * x - 0.5 * y).collect();
        let f = |c: &[f64]| susceptibility_to_field(c, dims, [1.0, 1.2, 0.8], [0.6, 0.0, 0.8], 100.0).unwrap();
        let (fa, fb, fm) = (f(&a), f(&b), f(&mix));
        let scale = fm.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for i in 0..512 {
            assert!((fm[i] - (2.0 * fa[i] - 0.5 * fb[i])).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn sphere_matches_analytic_field() {
        // Oracle: a uniformly magnetised sphere has zero internal field (Lorentz-corrected
        // kernel) and an external dipole field scale*chi*(R/r)^3*(3cos^2 - 1)/3.
        let n = 64;
        let dims = Dims3::new(n, n, n);
        let rad = 6.0;
        let c = n as f64 / 2.0;
        let chi: Vec<f64> = (0..dims.len())
            .map(|i| {
                let (x, y, z) = dims.coords(i);
                let r2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2) + (z as f64 - c).powi(2);
                if r2 <= rad * rad { 1.0 } else { 0.0 }
            })
            .collect();
        // effective radius from the voxelised volume
        let vol: f64 = chi.iter().sum();
        let r_eff = (3.0 * vol / (4.0 * std::f64::consts::PI)).cbrt();
        let field = susceptibility_to_field(&chi, dims, [1.0; 3], [1.0, 0.0, 0.0], 1.0).unwrap();
        let peak = 2.0 / 3.0;
        let mut worst: f64 = 0.0;
        for i in 0..dims.len() {
            let (x, y, z) = dims.coords(i);
            let d = [x as f64 - c, y as f64 - c, z as f64 - c];
            let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let expected = if r < 0.5 * rad {
                0.0
            } else if r > 1.5 * rad && r < 2.5 * rad {
                let cos = d[0] / r;
                (r_eff / r).powi(3) * (3.0 * cos * cos - 1.0) / 3.0
            } else {
                continue;
            };
            worst = worst.max((field[i] - expected).abs());
        }
        assert!(worst < 0.05 * peak, "worst deviation {worst}");
    }
}
