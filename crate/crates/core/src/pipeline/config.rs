use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augmentation::{AugmentConfig, Decoding};
use crate::dataset::InputFormat;
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::training::{Direction, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Reverse pre-train, augment, fine-tune the pre-trained weights.
    Asrep,
    /// Reverse pre-train and augment, then train a fresh model on the augmented corpus.
    ReTrain,
    /// Forward training on the original corpus only.
    NoAugmentBaseline,
}

impl Mode {
    pub fn augments(self) -> bool {
        !matches!(self, Mode::NoAugmentBaseline)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Asrep => "asrep",
            Mode::ReTrain => "re-train",
            Mode::NoAugmentBaseline => "no-augment-baseline",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asrep" => Ok(Mode::Asrep),
            "re-train" => Ok(Mode::ReTrain),
            "no-augment-baseline" => Ok(Mode::NoAugmentBaseline),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    JsonLines,
    Tsv,
}

/// Every knob of a run. Loaded from a flat TOML file; unknown keys are errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: PathBuf,
    pub format: DataFormat,
    pub user_field: String,
    pub item_field: String,
    pub time_field: String,

    pub max_len: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    /// FFN width; 0 means "same as hidden".
    pub ffn: usize,
    pub init_std: f64,

    pub dropout: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub negatives_per_position: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub early_stopping: bool,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub exclude_pseudo_targets: bool,

    pub k: usize,
    pub m: usize,
    /// 0 selects greedy decoding; otherwise softmax sampling at this temperature.
    pub temperature: f64,
    pub augment_inference: bool,

    pub num_negatives: usize,
    pub eval_seed: u64,

    pub mode: Mode,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            dataset: PathBuf::from("data/reviews_Beauty_5.json.gz"),
            format: DataFormat::JsonLines,
            user_field: "reviewerID".into(),
            item_field: "asin".into(),
            time_field: "unixReviewTime".into(),
            max_len: 100,
            hidden: 128,
            layers: 2,
            heads: 1,
            ffn: 0,
            init_std: 0.02,
            dropout: 0.7,
            learning_rate: 0.001,
            batch_size: 128,
            negatives_per_position: 1,
            pretrain_epochs: 50,
            finetune_epochs: 50,
            early_stopping: true,
            patience: 0,
            exclude_pseudo_targets: false,
            k: 15,
            m: 18,
            temperature: 0.0,
            augment_inference: true,
            num_negatives: 100,
            eval_seed: 2021,
            mode: Mode::Asrep,
            seed: 42,
            out: PathBuf::from("runs/default"),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config(1)?;
        self.train_config(Direction::Forward, 1).validate()?;
        if self.pretrain_epochs == 0 && self.mode.augments() {
            return Err(Error::Config("pretrain_epochs must be >= 1".into()));
        }
        if self.finetune_epochs == 0 {
            return Err(Error::Config("finetune_epochs must be >= 1".into()));
        }
        self.augment_config().validate()?;
        if self.num_negatives == 0 {
            return Err(Error::Config("num_negatives must be >= 1".into()));
        }
        if self.temperature < 0.0 {
            return Err(Error::Config("temperature must be >= 0".into()));
        }
        Ok(())
    }

    pub fn input_format(&self) -> InputFormat {
        match self.format {
            DataFormat::Tsv => InputFormat::Tsv,
            DataFormat::JsonLines => InputFormat::JsonLines {
                user_field: self.user_field.clone(),
                item_field: self.item_field.clone(),
                time_field: self.time_field.clone(),
            },
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            vocab_size,
            hidden: self.hidden,
            max_len: self.max_len,
            layers: self.layers,
            heads: self.heads,
            ffn: if self.ffn == 0 { self.hidden } else { self.ffn },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self, direction: Direction, epochs: usize) -> TrainConfig {
        TrainConfig {
            direction,
            epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            dropout: self.dropout,
            negatives_per_position: self.negatives_per_position,
            seed: self.seed,
            exclude_pseudo_targets: self.exclude_pseudo_targets,
            patience: (self.patience > 0).then_some(self.patience),
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            k: self.k,
            m: self.m,
            decoding: if self.temperature > 0.0 {
                Decoding::Sample {
                    temperature: self.temperature,
                    seed: self.seed,
                }
            } else {
                Decoding::Greedy
            },
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            num_negatives: self.num_negatives,
            seed: self.eval_seed,
        }
    }
}
