//! Run configuration: one JSON document with a section per component.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SatError};
use crate::model::SatConfig;
use crate::objective::LossWeights;
use crate::optim::OptimConfig;
use crate::synth::{AugmentConfig, SynthConfig};

/// Which encoder features are active. The variant always wins over the
/// `token_replay` / `rab` fields of the model section.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Sat,
    SatNoTr,
    SatNoRab,
    MvmtVit,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Sat, Variant::SatNoTr, Variant::SatNoRab, Variant::MvmtVit];

    /// `(token_replay, rab)`
    pub fn flags(self) -> (bool, bool) {
        match self {
            Variant::Sat => (true, true),
            Variant::SatNoTr => (false, true),
            Variant::SatNoRab => (true, false),
            Variant::MvmtVit => (false, false),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Sat => "sat",
            Variant::SatNoTr => "sat_no_tr",
            Variant::SatNoRab => "sat_no_rab",
            Variant::MvmtVit => "mvmt_vit",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: SatConfig,
    pub optim: OptimConfig,
    pub data: SynthConfig,
    pub loss: LossWeights,
    pub augment: AugmentConfig,
    pub variant: Variant,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: SatConfig::default(),
            optim: OptimConfig::default(),
            data: SynthConfig::default(),
            loss: LossWeights::default(),
            augment: AugmentConfig::default(),
            variant: Variant::Sat,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Mixed into the run seed for the training stream so it never coincides
/// with the parameter-initialisation stream.
const TRAIN_STREAM_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| SatError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SatError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            SatError::Config(msg) => SatError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Model section with the variant's flags applied.
    pub fn resolved_model(&self) -> SatConfig {
        let (token_replay, rab) = self.variant.flags();
        SatConfig { token_replay, rab, ..self.model.clone() }
    }

    pub fn init_seed(&self) -> u64 {
        self.seed
    }

    pub fn train_seed(&self) -> u64 {
        self.seed ^ TRAIN_STREAM_SALT
    }

    pub fn validate(&self) -> Result<()> {
        self.resolved_model().validate()?;
        self.optim.validate()?;
        self.data.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        if self.data.class_counts != self.model.class_counts || self.data.image_size != self.model.image_size {
            return Err(SatError::Config(format!(
                "data section (K {:?}, size {}) disagrees with the model (K {:?}, size {})",
                self.data.class_counts, self.data.image_size, self.model.class_counts, self.model.image_size
            )));
        }
        Ok(())
    }
}
