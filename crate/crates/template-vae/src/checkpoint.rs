//! Versioned JSON checkpoints: both parameter sets, the training
//! configuration, and enough RNG state to resume at an epoch boundary.
//!
//! All per-example noise is forked from one master stream keyed by
//! `(master_seed, epoch)`, so `(master_seed, next_epoch)` *is* the sampler
//! state — restoring it replays the remaining epochs exactly as an
//! uninterrupted run would have produced them. Floats survive the JSON round
//! trip bit-for-bit (shortest-roundtrip formatting on write, exact parse on
//! read).

use crate::error::VaeError;
use crate::params::{GenerativeParams, InferenceParams};
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// Bump when the serialized layout changes; loading any other version fails
/// loudly instead of misinterpreting bytes.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub theta: GenerativeParams,
    pub phi: InferenceParams,
    pub config: TrainConfig,
    /// Seed of the master noise stream the run was launched with.
    pub master_seed: u64,
    /// First epoch that has *not* been applied to `theta`/`phi`.
    pub next_epoch: usize,
}

impl Checkpoint {
    pub fn new(
        theta: &GenerativeParams,
        phi: &InferenceParams,
        config: &TrainConfig,
        next_epoch: usize,
    ) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            theta: theta.clone(),
            phi: phi.clone(),
            config: config.clone(),
            master_seed: config.seed,
            next_epoch,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), VaeError> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VaeError> {
        let checkpoint: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
        if checkpoint.version != CHECKPOINT_VERSION {
            return Err(VaeError::CheckpointVersion {
                found: checkpoint.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        Ok(checkpoint)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scratch(name: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("template-vae-{}-{name}.json", std::process::id()))
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let theta = GenerativeParams::seeded(7, 3, 2, 4, 0.83, 19);
        let phi = InferenceParams::seeded(7, 3, 2, 3, 0.31, 20);
        let config = TrainConfig::default();
        let saved = Checkpoint::new(&theta, &phi, &config, 5);

        let path = scratch("roundtrip");
        saved.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        std::fs::remove_file(&path).ok();

        assert_eq!(loaded.next_epoch, 5);
        assert_eq!(loaded.master_seed, config.seed);
        let (a, b) = (theta.to_flat(), loaded.theta.to_flat());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        let (a, b) = (phi.to_flat(), loaded.phi.to_flat());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(loaded.config, config);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let theta = GenerativeParams::seeded(4, 2, 2, 2, 0.5, 1);
        let phi = InferenceParams::seeded(4, 2, 2, 2, 0.5, 2);
        let mut checkpoint = Checkpoint::new(&theta, &phi, &TrainConfig::default(), 0);
        checkpoint.version = CHECKPOINT_VERSION + 1;

        let path = scratch("version");
        fs::write(&path, serde_json::to_string(&checkpoint).unwrap()).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        std::fs::remove_file(&path).ok();
        assert!(matches!(
            err,
            VaeError::CheckpointVersion { found, expected }
                if found == CHECKPOINT_VERSION + 1 && expected == CHECKPOINT_VERSION
        ));
    }
}
