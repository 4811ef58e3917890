//! Run configuration (TOML). Every section rejects unknown keys.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::autodiff::OptimizerKind;
use crate::bench::{default_thetas, Method};
use crate::colorsim::{Camera, PowerParams};
use crate::data::DEFAULT_PROPORTIONS;
use crate::error::{Error, Result};
use crate::models::{AdapterInit, ArchConfig};
use crate::synth::SynthConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    /// Directory of CIFAR-10 binary batches.
    Cifar10,
    /// Generated in memory from `[synthetic]`.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub format: DatasetFormat,
    pub path: PathBuf,
    /// Train/val/test fractions of the held-out pool.
    pub proportions: [f64; 3],
}

/// Training schedule; the seed comes from the top-level `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Schedule {
    fn from_train(c: &TrainConfig) -> Self {
        Self {
            optimizer: c.optimizer,
            learning_rate: c.learning_rate,
            batch_size: c.batch_size,
            max_epochs: c.max_epochs,
            patience: c.patience,
        }
    }

    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    pub arch: ArchConfig,
    /// Trailing fraction of the pre-training set held out for early stopping.
    pub val_fraction: f64,
    pub train: Schedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSection {
    pub layers: usize,
    pub init: AdapterInit,
    pub train: Schedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub train: Schedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub thetas: Vec<f64>,
    pub subset_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub methods: Vec<String>,
    pub dataset: DatasetSection,
    pub scenario: Camera,
    pub backbone: BackboneSection,
    pub adapter: AdapterSection,
    pub finetune: FinetuneSection,
    pub sweep: SweepSection,
    pub synthetic: SynthConfig,
    pub output: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            methods: Method::TABLE.iter().map(|m| m.to_string()).collect(),
            dataset: DatasetSection {
                format: DatasetFormat::Cifar10,
                path: PathBuf::from("data/cifar-10-batches-bin"),
                proportions: DEFAULT_PROPORTIONS,
            },
            scenario: Camera::ColorRotation { theta: 150.0 },
            backbone: BackboneSection {
                arch: ArchConfig::small_vgg(),
                val_fraction: 0.1,
                train: Schedule::from_train(&TrainConfig::backbone_default()),
            },
            adapter: AdapterSection {
                layers: 5,
                init: AdapterInit::Identity,
                train: Schedule::from_train(&TrainConfig::adapter_default()),
            },
            finetune: FinetuneSection {
                train: Schedule::from_train(&TrainConfig::finetune_default()),
            },
            sweep: SweepSection {
                thetas: default_thetas(),
                subset_size: 2000,
            },
            synthetic: SynthConfig::default(),
            output: OutputSection {
                dir: PathBuf::from("runs/default"),
            },
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn methods(&self) -> Result<Vec<Method>> {
        self.methods.iter().map(|m| Method::parse(m)).collect()
    }

    pub fn backbone_train(&self) -> TrainConfig {
        self.backbone.train.with_seed(self.seed)
    }

    pub fn adapter_train(&self) -> TrainConfig {
        self.adapter.train.with_seed(self.seed)
    }

    pub fn finetune_train(&self) -> TrainConfig {
        self.finetune.train.with_seed(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.methods()?;
        self.backbone.arch.param_shapes()?;
        for t in [
            self.backbone_train(),
            self.adapter_train(),
            self.finetune_train(),
        ] {
            t.validate()?;
        }
        if !(self.backbone.val_fraction > 0.0 && self.backbone.val_fraction < 1.0) {
            return Err(Error::InvalidArgument(
                "backbone.val_fraction must be in (0, 1)".into(),
            ));
        }
        if self.adapter.layers == 0 {
            return Err(Error::InvalidArgument("adapter.layers must be >= 1".into()));
        }
        if let Camera::Power {
            exponents: [r, g, b],
        } = self.scenario
        {
            PowerParams::new(r, g, b)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let d = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&d.to_toml()).unwrap(), d);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = RunConfig::default()
            .to_toml()
            .replace("[output]", "[output]\nverbose = true");
        let e = RunConfig::from_toml(&text).unwrap_err().to_string();
        assert!(e.contains("verbose"), "{e}");
        let text = RunConfig::default()
            .to_toml()
            .replace("seed = 0", "seed = 0\nsede = 1");
        assert!(RunConfig::from_toml(&text).is_err());
    }

    #[test]
    fn power_scenario_parses() {
        let text = RunConfig::default().to_toml().replace(
            "kind = \"color-rotation\"\ntheta = 150.0",
            "kind = \"power\"\nexponents = [0.2, 0.3, 0.4]",
        );
        let c = RunConfig::from_toml(&text).unwrap();
        assert_eq!(
            c.scenario,
            Camera::Power {
                exponents: [0.2, 0.3, 0.4]
            }
        );
    }
}
