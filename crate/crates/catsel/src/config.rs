//! Run configuration: TOML on disk, embedded verbatim (as JSON) in every artifact.

use std::fs;
use std::path::{Path, PathBuf};

use catsel_core::chat::ChatConfig;
use catsel_core::classifier::ClassifierSettings;
use catsel_core::optim::OptimConfig;
use catsel_core::prep::AugmentConfig;
use catsel_core::rollout::RolloutVariant;
use catsel_core::train::{Attachment, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Environment variable naming the directory relative output paths resolve against.
pub const OUTPUT_ROOT_ENV: &str = "CATSEL_OUTPUT_ROOT";

/// Optimizer defaults before any explicit `[optim]` table is applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimPreset {
    /// 20 epochs at twenty times the reference peak rates.
    #[default]
    Desk,
    /// 200 epochs, peak 1e-4 with the selector and 2e-4 without.
    Reference,
}

/// Autoencoder pretraining of the selector before supervised training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub pad_to: usize,
    pub epochs: usize,
    pub max_lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { pad_to: 0, epochs: 20, max_lr: 2e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub attachment: Attachment,
    pub chat: ChatConfig,
    pub classifier: ClassifierSettings,
    pub optim_preset: OptimPreset,
    /// Overrides the preset entirely when present.
    pub optim: Option<OptimConfig>,
    pub variant: RolloutVariant,
    pub augment: AugmentConfig,
    pub seeds: Vec<u64>,
    /// Only "f64" is implemented.
    pub precision: String,
    /// Seeds trained concurrently.
    pub jobs: usize,
    pub pretrain: Option<PretrainConfig>,
    /// Checkpoint whose selector parameters initialize every seed.
    pub init_from: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            output: None,
            attachment: Attachment::ChatClassifier,
            chat: ChatConfig::main(0),
            classifier: ClassifierSettings::default(),
            optim_preset: OptimPreset::Desk,
            optim: None,
            variant: RolloutVariant::AroH,
            augment: AugmentConfig::default(),
            seeds: (0..9).collect(),
            precision: "f64".into(),
            jobs: 1,
            pretrain: None,
            init_from: None,
        }
    }
}

impl RunConfig {
    /// Reads TOML, or a run result JSON whose embedded config is reused.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg = if path.extension().is_some_and(|e| e == "json") {
            #[derive(Deserialize)]
            struct Embedded {
                config: RunConfig,
            }
            serde_json::from_str::<Embedded>(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?.config
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// Preset and attachment resolved into the optimizer actually used.
    pub fn effective_optim(&self) -> OptimConfig {
        if let Some(o) = &self.optim {
            return o.clone();
        }
        match self.optim_preset {
            OptimPreset::Desk => TrainConfig::desk(self.attachment).optim,
            OptimPreset::Reference => TrainConfig::new(self.attachment).optim,
        }
    }

    /// Fills in derived values and checks the schema-level constraints.
    pub fn resolve(mut self) -> Result<Self> {
        self.optim = Some(self.effective_optim());
        if self.precision != "f64" {
            return Err(Error::Config(format!("precision {:?} unsupported, only \"f64\" is implemented", self.precision)));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        catsel_core::train::check_seeds(&self.seeds)?;
        self.optim.as_ref().expect("set above").validate()?;
        if self.chat.n_heads == 0 || self.chat.n_cat == 0 || self.chat.n_layers == 0 {
            return Err(Error::Config("chat needs at least one layer, head and CAT".into()));
        }
        if let Some(p) = &self.pretrain {
            if self.attachment != Attachment::ChatClassifier {
                return Err(Error::Config("pretraining needs the selector attached".into()));
            }
            if p.epochs == 0 || !(p.max_lr > 0.0) {
                return Err(Error::Config("pretrain needs epochs > 0 and max_lr > 0".into()));
            }
        }
        Ok(self)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            attachment: self.attachment,
            chat: self.chat.clone(),
            classifier: self.classifier.clone(),
            optim: self.effective_optim(),
            variant: self.variant,
            augment: self.augment,
        }
    }

    pub fn dataset_dir(&self) -> Result<&Path> {
        self.dataset.as_deref().ok_or_else(|| Error::Config("no dataset path (set `dataset` or pass --dataset)".into()))
    }

    pub fn output_dir(&self, fallback: &str) -> PathBuf {
        resolve_output(self.output.as_deref().unwrap_or(Path::new(fallback)))
    }
}

/// Relative paths go under `$CATSEL_OUTPUT_ROOT` when it is set.
pub fn resolve_output(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}
