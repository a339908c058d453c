//! Run configuration: one JSON document holding every setting of a run.

use std::fs;
use std::path::{Path, PathBuf};

use irk_core::model::ModelConfig;
use irk_core::protocol::RetrievalFeature;
use irk_core::synth::SynthConfig;
use irk_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, json_err, IrkError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Dataset used when no dataset directory is given.
    pub synth: SynthConfig,
    /// Seeds model initialisation, sampling and augmentation.
    pub seed: u64,
    pub steps: u64,
    /// Single-threaded everywhere, for bitwise-reproducible runs.
    pub deterministic: bool,
    /// Steps between checkpoints; the final step always writes one. 0 means
    /// only the final checkpoint.
    pub checkpoint_every: u64,
    pub feature: RetrievalFeature,
    /// Dataset directory written by `irk synth`.
    pub data: Option<PathBuf>,
    /// Output directory or file, depending on the command.
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Single-core preset: the default synthetic set, P=4, K=4, 500 steps.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::desk(),
            synth: SynthConfig::default(),
            seed: 0,
            steps: 500,
            deterministic: false,
            checkpoint_every: 100,
            feature: RetrievalFeature::default(),
            data: None,
            out: None,
        }
    }

    /// Published optimisation settings: P=32, K=4, lr 1e-5 after warming up
    /// from 1e-7 over 1000 steps. The synthetic set is enlarged so that 32
    /// identities with 4 samples each exist.
    pub fn full() -> Self {
        Self {
            train: TrainConfig::default(),
            synth: SynthConfig {
                train_identities: 64,
                ..SynthConfig::default()
            },
            steps: 2000,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(IrkError::Config(format!("unknown preset `{other}` (desk or full)"))),
        }
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(json_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synth.validate()?;
        self.train.validate()?;
        if self.train.k > self.synth.samples_per_identity {
            return Err(IrkError::Config(format!(
                "K={} exceeds the {} samples per identity",
                self.train.k, self.synth.samples_per_identity
            )));
        }
        if self.train.p > self.synth.train_identities {
            return Err(IrkError::Config(format!(
                "P={} exceeds the {} training identities",
                self.train.p, self.synth.train_identities
            )));
        }
        let (mh, mw) = (self.model.image_height, self.model.image_width);
        if (mh, mw) != (self.synth.image_height, self.synth.image_width) {
            return Err(IrkError::Config(format!(
                "model expects {mh}x{mw} images, synth makes {}x{}",
                self.synth.image_height, self.synth.image_width
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        RunConfig::desk().validate().unwrap();
        RunConfig::full().validate().unwrap();
        let p = RunConfig::full().train;
        assert_eq!((p.p, p.k, p.schedule.start_lr, p.schedule.base_lr), (32, 4, 1e-7, 1e-5));
    }

    #[test]
    fn json_round_trips_and_rejects_unknown_keys() {
        let c = RunConfig::full();
        let text = serde_json::to_string_pretty(&c).unwrap();
        assert_eq!(RunConfig::from_json(&text, Path::new("c")).unwrap(), c);
        assert!(RunConfig::from_json(r#"{"stepz": 3}"#, Path::new("c")).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"pp": 3}}"#, Path::new("c")).is_err());
        let partial = RunConfig::from_json(r#"{"seed": 9}"#, Path::new("c")).unwrap();
        assert_eq!(partial, RunConfig { seed: 9, ..RunConfig::desk() });
    }

    #[test]
    fn k_above_samples_is_rejected() {
        let mut c = RunConfig::desk();
        c.train.k = 9;
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("K=9"), "{e}");
    }
}
