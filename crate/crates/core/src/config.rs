//! One JSON document that pins everything a run needs: backbone, task
//! data, routing schedule, selector/fusion choices, training and benchmark
//! settings. Output files reference runs by the document's SHA-256, so two
//! CSVs with the same hash came from byte-identical configurations.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CroprError, Result};
use crate::model::{FusionKind, ModelConfig, SelectorChoice};
use crate::schedule::PruningSchedule;
use crate::train::{TaskData, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Unmeasured passes before timing starts.
    pub warmup: usize,
    /// Measured passes.
    pub iters: usize,
    /// Throughput is reported per chunk size; the best one wins.
    pub batch_sizes: Vec<usize>,
}

impl BenchConfig {
    pub fn toy() -> Self {
        BenchConfig { warmup: 2, iters: 12, batch_sizes: vec![1, 4] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(CroprError::config("benchmark needs at least one measured pass"));
        }
        if self.batch_sizes.is_empty() || self.batch_sizes.iter().any(|&b| b == 0) {
            return Err(CroprError::config("batch sizes must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: PruningSchedule,
    pub data: TaskData,
    pub train: TrainConfig,
    pub bench: BenchConfig,
}

impl RunConfig {
    /// Assemble a toy run: backbone geometry comes from the task data, the
    /// schedule prunes 16 tokens per eligible block.
    pub fn toy(data: TaskData, selector: SelectorChoice, fusion: FusionKind) -> Result<Self> {
        let vit = data.toy_backbone();
        let llf = matches!(fusion, FusionKind::Llf);
        let last = if llf { vit.depth - 2 } else { vit.depth - 1 };
        let entries: Vec<(usize, usize)> = (1..=last).map(|b| (b, 16)).collect();
        let schedule =
            PruningSchedule::staged(vit.depth, vit.num_patches(), &entries, llf, vit.cls_token)?;
        let config = RunConfig {
            model: ModelConfig {
                task: data.task_kind(),
                vit,
                selector,
                fusion,
                variants: Default::default(),
            },
            schedule,
            data,
            train: TrainConfig::toy(),
            bench: BenchConfig::toy(),
        };
        config.validate()?;
        Ok(config)
    }

    /// Cross-field consistency; every load and save passes through here.
    pub fn validate(&self) -> Result<()> {
        self.model.vit.validate()?;
        if !self.schedule.entries.is_empty() {
            self.schedule.validate()?;
        }
        self.train.validate()?;
        self.bench.validate()?;
        if self.model.task != self.data.task_kind() {
            return Err(CroprError::config(format!(
                "model task {:?} does not match the data generator's {:?}",
                self.model.task,
                self.data.task_kind()
            )));
        }
        let (side, patch, channels) = self.data.geometry();
        if side != self.model.vit.image_side
            || patch != self.model.vit.patch_size
            || channels != self.model.vit.channels
        {
            return Err(CroprError::config(format!(
                "data geometry {side}x{side}/{patch} ({channels}ch) does not match the backbone"
            )));
        }
        if self.data.classes() != self.model.vit.num_classes {
            return Err(CroprError::config("data classes do not match the head width"));
        }
        if self.schedule.depth != self.model.vit.depth
            || self.schedule.m0 != self.model.vit.num_patches()
            || self.schedule.cls != self.model.vit.cls_token
        {
            return Err(CroprError::config("schedule does not fit the backbone"));
        }
        if matches!(self.model.fusion, FusionKind::Llf) != self.schedule.llf {
            return Err(CroprError::config("fusion kind and schedule fusion flag disagree"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is plain data")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(s)
            .map_err(|e| CroprError::config(format!("bad run config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        fs::write(path, self.to_json()).map_err(CroprError::from)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(CroprError::from)?;
        Self::from_json(&text)
    }

    /// SHA-256 of the compact JSON form, as lowercase hex. Stable across
    /// pretty-printing but sensitive to every setting.
    pub fn hash_hex(&self) -> String {
        let compact = serde_json::to_string(self).expect("config is plain data");
        let mut h = Sha256::new();
        h.update(compact.as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// First 12 hex digits, for file names and log lines.
    pub fn short_hash(&self) -> String {
        self.hash_hex()[..12].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{NeedleSpec, SegSpec};

    fn needle_config() -> RunConfig {
        RunConfig::toy(
            TaskData::Needle(NeedleSpec::toy()),
            SelectorChoice::Cropr { invert: false },
            FusionKind::None,
        )
        .unwrap()
    }

    #[test]
    fn toy_presets_validate_for_every_fusion_family() {
        needle_config();
        RunConfig::toy(
            TaskData::Seg(SegSpec::toy()),
            SelectorChoice::Cropr { invert: false },
            FusionKind::Llf,
        )
        .unwrap();
        RunConfig::toy(
            TaskData::Seg(SegSpec::toy()),
            SelectorChoice::Cropr { invert: false },
            FusionKind::DtopLogit,
        )
        .unwrap();
    }

    #[test]
    fn json_round_trip_preserves_everything() {
        let config = needle_config();
        let back = RunConfig::from_json(&config.to_json()).unwrap();
        assert_eq!(config, back);
        assert_eq!(config.hash_hex(), back.hash_hex());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        let config = needle_config();
        config.save(&path).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), config);
    }

    #[test]
    fn hash_is_stable_and_change_sensitive() {
        let a = needle_config();
        let mut b = a.clone();
        assert_eq!(a.hash_hex(), b.hash_hex());
        assert_eq!(a.hash_hex().len(), 64);
        assert!(a.hash_hex().chars().all(|c| c.is_ascii_hexdigit()));
        b.train.seed += 1;
        assert_ne!(a.hash_hex(), b.hash_hex());
        assert_eq!(a.short_hash(), a.hash_hex()[..12]);
    }

    #[test]
    fn validation_rejects_cross_field_drift() {
        // Task/head mismatch.
        let mut config = needle_config();
        config.model.vit.num_classes = 5;
        assert!(config.validate().is_err());

        // Geometry mismatch.
        let mut config = needle_config();
        config.model.vit.image_side = 32;
        assert!(config.validate().is_err());

        // Schedule depth drift.
        let mut config = needle_config();
        config.schedule.depth = 9;
        assert!(config.validate().is_err());

        // Fusion flag drift.
        let mut config = needle_config();
        config.schedule.llf = true;
        assert!(config.validate().is_err());

        // Bad JSON is a config error, not a panic.
        assert!(RunConfig::from_json("{").is_err());
    }
}
