//! Run configuration: one JSON document that fixes the environment, the
//! training settings, the latent sampler, the architecture and the output
//! layout. Unknown keys are rejected; `FBZERO_SEED` overrides the seed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fbcore::{LatentSamplerConfig, ModelConfig};
use crate::toyenv::{EnvConfig, EnvKind};
use crate::trainer::TrainConfig;

pub const SEED_ENV_VAR: &str = "FBZERO_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid {SEED_ENV_VAR} value `{0}`")]
    BadSeedOverride(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Base environment; `train` owns episode length, history and fall prob.
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub sampler: LatentSamplerConfig,
    pub model: ModelConfig,
    /// Motion dataset directory (one line-format file per motion).
    pub dataset: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: EnvConfig::pointmass(),
            train: TrainConfig::default(),
            sampler: LatentSamplerConfig::default(),
            model: ModelConfig::default(),
            dataset: None,
            out_dir: PathBuf::from("runs/default"),
            threads: 1,
        }
    }
}

impl RunConfig {
    pub fn for_env(kind: EnvKind) -> Self {
        RunConfig { env: EnvConfig::for_kind(kind), ..Default::default() }
    }

    /// Parse, validate, and apply the `FBZERO_SEED` override if set.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
        cfg.apply_seed_override(std::env::var(SEED_ENV_VAR).ok().as_deref())?;
        Ok(cfg)
    }

    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<(), ConfigError> {
        if let Some(raw) = value {
            self.train.seed = raw
                .trim()
                .parse::<u64>()
                .map_err(|_| ConfigError::BadSeedOverride(raw.to_string()))?;
        }
        Ok(())
    }

    /// Canonical serialized form, written into every run directory.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    /// FNV-1a 64-bit hash of the canonical serialization; identifies the
    /// resolved config in checkpoints and reports.
    pub fn hash(&self) -> String {
        format!("{:016x}", fnv1a(self.to_json().as_bytes()))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_hash_stability() {
        let cfg = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(cfg.to_json(), back.to_json());
        assert_eq!(cfg.hash(), back.hash());
        assert_eq!(cfg.hash().len(), 16);
        let mut other = RunConfig::default();
        other.train.seed += 1;
        assert_ne!(cfg.hash(), other.hash());
    }

    #[test]
    fn fnv_known_vectors() {
        // Published FNV-1a test vectors.
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let err = serde_json::from_str::<RunConfig>(r#"{"train": {}, "bogus_key": 1}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("bogus_key"), "error should name the key: {err}");
        assert!(err.contains("line"), "error should carry a location: {err}");
    }

    #[test]
    fn seed_override() {
        let mut cfg = RunConfig::default();
        cfg.apply_seed_override(Some("1234")).unwrap();
        assert_eq!(cfg.train.seed, 1234);
        assert!(matches!(
            cfg.apply_seed_override(Some("not-a-seed")),
            Err(ConfigError::BadSeedOverride(_))
        ));
        cfg.apply_seed_override(None).unwrap();
        assert_eq!(cfg.train.seed, 1234);
    }

    #[test]
    fn load_from_file_with_partial_body() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"train": {"seed": 7, "n_env": 4}}"#).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.train.n_env, 4);
        assert_eq!(cfg.threads, 1);
    }
}
