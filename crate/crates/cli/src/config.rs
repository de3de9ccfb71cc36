//! Experiment configuration: one TOML file with nested tables per module.

use std::path::{Path, PathBuf};

use mcmap_core::mapping::MappingConfig;
use mcmap_core::phantom::{make_phantom, PhantomSpec};
use mcmap_core::seqsim::SequenceParams;
use mcmap_recon::dataset::DataConfig;
use mcmap_recon::network::NetConfig;
use mcmap_recon::training::{TrainConfig, VARIANTS};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Dictionary grids as `[first, last, step]` in ms, plus the QSM settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingSection {
    pub t1_grid_ms: [f64; 3],
    pub t2_grid_ms: [f64; 3],
    pub tkd_threshold: f64,
    pub pdf_iterations: usize,
}

impl Default for MappingSection {
    fn default() -> Self {
        let m = MappingConfig::default();
        Self { t1_grid_ms: [100.0, 2000.0, 10.0], t2_grid_ms: [10.0, 200.0, 1.0], tkd_threshold: m.tkd_threshold, pdf_iterations: m.pdf_iterations }
    }
}

fn grid(name: &str, [first, last, step]: [f64; 3]) -> Result<Vec<f64>> {
    if !(step > 0.0 && first > 0.0 && last >= first && first.is_finite() && last.is_finite()) {
        return Err(Error::Validation(format!("{name} must be [first > 0, last >= first, step > 0]")));
    }
    let n = ((last - first) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| first + step * i as f64).collect())
}

impl MappingSection {
    pub fn t1_grid(&self) -> Result<Vec<f64>> {
        grid("t1_grid_ms", self.t1_grid_ms)
    }

    pub fn t2_grid(&self) -> Result<Vec<f64>> {
        grid("t2_grid_ms", self.t2_grid_ms)
    }

    pub fn qsm(&self) -> MappingConfig {
        MappingConfig { tkd_threshold: self.tkd_threshold, pdf_iterations: self.pdf_iterations }
    }
}

/// Top-level experiment. The top-level `seed` drives every random draw:
/// phantom seeds derive from it and it replaces `training.seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub phantom: PhantomSpec,
    #[serde(default)]
    pub sequence: SequenceParams,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub network: NetConfig,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub mapping: MappingSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Validation(e.to_string()))?;
        cfg.training.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.training.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.sequence.validate()?;
        make_phantom(&self.phantom)?;
        self.data.validate(&self.phantom)?;
        self.network.validate()?;
        self.training.validate()?;
        self.mapping.qsm().validate()?;
        self.mapping.t1_grid()?;
        self.mapping.t2_grid()?;
        let (ny, nz) = (self.phantom.dims.ny, self.phantom.dims.nz);
        if self.training.calibration > ny.min(nz) {
            return Err(Error::Validation(format!("calibration block {} does not fit the grid", self.training.calibration)));
        }
        Ok(())
    }

    pub fn n_echoes(&self) -> usize {
        self.sequence.n_echoes()
    }

    pub fn train_config(&self, variant: &str) -> Result<TrainConfig> {
        Ok(self.training.with_variant(variant)?)
    }
}

/// Short content hash of any serializable value.
pub fn content_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    Sha256::digest(&bytes)[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Config hashes keying the artifacts of each stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageKeys {
    pub phantom: String,
    pub simulate: String,
    pub mapping: String,
}

impl StageKeys {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let d = &cfg.data;
        let phantom = content_hash(&(
            "phantom",
            cfg.seed,
            &cfg.phantom,
            d.n_coils,
            d.train_phantoms,
            d.test_phantoms,
            d.val_slices > 0,
        ));
        let simulate = content_hash(&("simulate", &phantom, &cfg.sequence, d));
        let mapping = content_hash(&("mapping", &cfg.mapping));
        Self { phantom, simulate, mapping }
    }

    pub fn train(&self, cfg: &ExperimentConfig, variant: &str) -> Result<String> {
        Ok(content_hash(&("train", &self.simulate, &cfg.network, cfg.train_config(variant)?)))
    }

    /// Reconstructions of `source`: an ablation variant or the fully sampled reference.
    pub fn reconstruct(&self, cfg: &ExperimentConfig, source: &str) -> Result<String> {
        if source == FULL {
            return Ok(content_hash(&("reconstruct", &self.simulate)));
        }
        Ok(content_hash(&("reconstruct", self.train(cfg, source)?)))
    }

    pub fn map(&self, cfg: &ExperimentConfig, source: &str) -> Result<String> {
        if source == TRUTH {
            return Ok(content_hash(&("map", &self.phantom, &self.mapping)));
        }
        Ok(content_hash(&("map", self.reconstruct(cfg, source)?, &self.mapping)))
    }
}

/// Source label of the fully sampled reconstruction.
pub const FULL: &str = "full";
/// Source label of the phantom ground-truth maps.
pub const TRUTH: &str = "truth";

pub fn check_variants(variants: &[String]) -> Result<()> {
    if variants.is_empty() {
        return Err(Error::Validation("no ablation variant selected".into()));
    }
    for v in variants {
        if !VARIANTS.contains(&v.as_str()) {
            return Err(Error::Validation(format!("unknown ablation variant {v:?}; expected one of {VARIANTS:?}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "seed = 3\n[data]\nn_coils = 2\n";

    #[test]
    fn keys_ignore_out_dir_and_follow_the_seed() {
        let a = ExperimentConfig::from_toml(BASE).unwrap();
        let b = ExperimentConfig::from_toml(&format!("out_dir = \"elsewhere\"\n{BASE}")).unwrap();
        assert_eq!(StageKeys::new(&a), StageKeys::new(&b));
        let c = a.clone().with_seed(4);
        assert_eq!(c.training.seed, 4);
        assert_ne!(StageKeys::new(&a).phantom, StageKeys::new(&c).phantom);
        assert_eq!(StageKeys::new(&a).mapping, StageKeys::new(&c).mapping);
    }

    #[test]
    fn training_keys_separate_variants_but_not_the_reference() {
        let cfg = ExperimentConfig::from_toml(BASE).unwrap();
        let k = StageKeys::new(&cfg);
        let hashes: Vec<String> = VARIANTS.iter().map(|v| k.train(&cfg, v).unwrap()).collect();
        for (i, h) in hashes.iter().enumerate() {
            assert!(!hashes[i + 1..].contains(h));
        }
        let mut longer = cfg.clone();
        longer.training.epochs_phase1 += 1;
        assert_ne!(k.train(&cfg, "11").unwrap(), k.train(&longer, "11").unwrap());
        assert_eq!(k.reconstruct(&cfg, FULL).unwrap(), k.reconstruct(&longer, FULL).unwrap());
    }

    #[test]
    fn top_level_seed_replaces_training_seed() {
        let cfg = ExperimentConfig::from_toml(&format!("{BASE}[training]\nseed = 99\n")).unwrap();
        assert_eq!(cfg.training.seed, 3);
    }

    #[test]
    fn malformed_configs_are_validation_errors() {
        for text in ["seed = 1\nbogus = 2\n", "[data]\nn_coils = 2\n", "seed = -1\n"] {
            assert!(matches!(ExperimentConfig::from_toml(text), Err(Error::Validation(_))), "{text}");
        }
        let mut cfg = ExperimentConfig::from_toml(BASE).unwrap();
        cfg.training.r = 0.0;
        assert!(matches!(cfg.validate(), Err(Error::Validation(_))));
        assert!(check_variants(&["10".into(), "2".into()]).is_err());
        assert!(check_variants(&[]).is_err());
    }
}
