use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::nets::ModelConfig;
use crate::shift::{ShiftKind, ShiftSpec};
use crate::synth::{Motion, SequenceSpec};
use crate::ttt::TttConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub grid_size: usize,
    pub n_frames: usize,
    /// Sequences cycle through these motions.
    pub motions: Vec<Motion>,
    /// Amplitude as a fraction of each motion's maximum, drawn uniformly.
    pub amplitude_range: [f64; 2],
    pub noise_floor: f64,
    /// Applied in order to every test frame, including the held-out labels.
    pub test_shifts: Vec<ShiftSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train: 90,
            n_test: 10,
            grid_size: 32,
            n_frames: 10,
            motions: vec![Motion::PulsatingEllipsoid, Motion::TranslatingBlob],
            amplitude_range: [0.8, 1.0],
            noise_floor: 0.02,
            test_shifts: vec![ShiftSpec::new(ShiftKind::IntensityGain, 0.3, 0)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Weight of each auxiliary loss next to the interpolation loss.
    pub aux_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            lr: 2e-4,
            batch_size: 1,
            aux_weight: 1.0,
        }
    }
}

/// Everything a run depends on. The resolved file written next to a run's
/// outputs reproduces it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ttt: TttConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            ttt: TttConfig::default(),
        }
    }
}

/// Stable 64-bit mix of a seed with a stream tag and an index (SplitMix64
/// finalizer).
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &b in tag.as_bytes().iter().chain(&index.to_le_bytes()) {
        h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Desk-scale setup used by the acceptance suite: 16^3 grids and a short
    /// training run.
    pub fn small(seed: u64) -> Self {
        let model = ModelConfig {
            grid_size: 16,
            patch_size: 4,
            ..Default::default()
        };
        ExperimentConfig {
            seed,
            data: DataConfig {
                n_train: 24,
                n_test: 4,
                grid_size: 16,
                ..Default::default()
            },
            model,
            train: TrainConfig {
                epochs: 40,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.ttt.validate()?;
        let d = &self.data;
        if d.grid_size != self.model.grid_size {
            return Err(Error::Config(format!(
                "data grid {} differs from model grid {}",
                d.grid_size, self.model.grid_size
            )));
        }
        if d.motions.is_empty() {
            return Err(Error::Config("at least one motion is required".into()));
        }
        let [lo, hi] = d.amplitude_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "amplitude range {:?} must lie within [0, 1]",
                d.amplitude_range
            )));
        }
        if d.n_frames < 3 {
            return Err(Error::Config("sequences need at least 3 frames".into()));
        }
        if self.train.lr <= 0.0 || self.train.batch_size == 0 || self.train.aux_weight < 0.0 {
            return Err(Error::Config(
                "training needs lr > 0, batch_size >= 1 and aux_weight >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Specification of sequence `index` of a split, derived from the seed.
    /// Test sequences use a separate seed stream, so they never coincide
    /// with training sequences.
    pub fn sequence_spec(&self, split: Split, index: usize) -> SequenceSpec {
        let d = &self.data;
        let seed = derive_seed(self.seed, split.name(), index as u64);
        let motion = d.motions[index % d.motions.len()];
        let max = match motion {
            Motion::PulsatingEllipsoid => 0.5,
            Motion::TranslatingBlob => 0.25,
        };
        // Uniform in the configured range, from the top 53 bits of a mixed seed.
        let u = (derive_seed(seed, "amplitude", 0) >> 11) as f64 / (1u64 << 53) as f64;
        let [lo, hi] = d.amplitude_range;
        SequenceSpec {
            grid_size: d.grid_size,
            n_frames: d.n_frames,
            motion,
            amplitude: max * (lo + (hi - lo) * u),
            noise_floor: d.noise_floor,
            seed,
        }
    }

    /// The configured shifts for test sequence `index`, with per-sequence
    /// seeds.
    pub fn test_shifts(&self, index: usize) -> Vec<ShiftSpec> {
        self.data
            .test_shifts
            .iter()
            .enumerate()
            .map(|(k, s)| ShiftSpec {
                kind: s.kind,
                magnitude: s.magnitude,
                seed: derive_seed(s.seed ^ self.seed, "shift", (index * 1000 + k) as u64),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_json() {
        let c = ExperimentConfig::small(4);
        let back: ExperimentConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        back.validate().unwrap();
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&ExperimentConfig::default().to_json()).unwrap();
        v["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<ExperimentConfig>(v).is_err());
    }

    #[test]
    fn sequence_specs_are_seeded_and_split_apart() {
        let c = ExperimentConfig::small(1);
        assert_eq!(c.sequence_spec(Split::Train, 3), c.sequence_spec(Split::Train, 3));
        assert_ne!(
            c.sequence_spec(Split::Train, 0).seed,
            c.sequence_spec(Split::Test, 0).seed
        );
        for i in 0..20 {
            let s = c.sequence_spec(Split::Test, i);
            s.validate().unwrap();
        }
        assert_ne!(
            ExperimentConfig::small(2).sequence_spec(Split::Train, 0),
            c.sequence_spec(Split::Train, 0)
        );
    }

    #[test]
    fn derive_seed_separates_tags_and_indices() {
        assert_ne!(derive_seed(0, "a", 0), derive_seed(0, "b", 0));
        assert_ne!(derive_seed(0, "a", 0), derive_seed(0, "a", 1));
        assert_eq!(derive_seed(5, "a", 2), derive_seed(5, "a", 2));
    }
}
