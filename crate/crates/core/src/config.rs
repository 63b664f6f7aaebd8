//! Experiment configuration in a flat `key = value` text format.
//!
//! ```text
//! # comments start with '#'
//! data = synth
//! rate = 0.3
//! losses = r,s,c
//! ```
//!
//! Every key accepted in a file is also accepted by [`ExperimentConfig::set`],
//! which the command line uses for flag overrides.

use std::path::{Path, PathBuf};

use crate::data::{self, Dataset, SynthConfig};
use crate::error::{Error, Result};
use crate::losses::{LossSet, LossWeights};
use crate::network::Network;
use crate::pruner::PruneConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synth(SynthConfig),
    Cifar10 {
        dir: PathBuf,
        train_cap: Option<usize>,
        test_cap: Option<usize>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub widths: [usize; 4],
    pub data: DataSource,
    pub train: TrainConfig,
    pub prune: PruneConfig,
    pub out: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            widths: Network::REFERENCE_WIDTHS,
            data: DataSource::Synth(SynthConfig::default()),
            train: TrainConfig {
                epochs: 15,
                ..TrainConfig::default()
            },
            prune: PruneConfig::default(),
            out: PathBuf::from("out"),
            seed: 0,
        }
    }
}

pub const KEYS: &[&str] = &[
    "widths",
    "data",
    "classes",
    "train_per_class",
    "test_per_class",
    "image_size",
    "noise",
    "train_cap",
    "test_cap",
    "epochs",
    "batch_size",
    "lr",
    "momentum",
    "weight_decay",
    "hflip",
    "crop_pad",
    "rate",
    "alpha",
    "beta",
    "eta",
    "losses",
    "selection_batches",
    "refit_epochs",
    "finetune_epochs",
    "finetune_lr",
    "divergence_factor",
    "seed",
    "out",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

fn synth<'a>(cfg: &'a mut ExperimentConfig, key: &str) -> Result<&'a mut SynthConfig> {
    match &mut cfg.data {
        DataSource::Synth(s) => Ok(s),
        DataSource::Cifar10 { .. } => Err(Error::Config(format!("'{key}' applies to synthetic data only"))),
    }
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean '{value}' for '{key}'"))),
    }
}

impl ExperimentConfig {
    /// Parses a config file's text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "widths" => {
                let w: Vec<usize> = value.split(',').map(|s| num(key, s.trim())).collect::<Result<_>>()?;
                self.widths = w
                    .try_into()
                    .map_err(|_| Error::Config("widths needs exactly four comma-separated values".into()))?;
            }
            "data" => {
                self.data = if value == "synth" {
                    DataSource::Synth(SynthConfig::default())
                } else {
                    DataSource::Cifar10 {
                        dir: PathBuf::from(value),
                        train_cap: None,
                        test_cap: None,
                    }
                };
            }
            "classes" => synth(self, key)?.classes = num(key, value)?,
            "train_per_class" => synth(self, key)?.train_per_class = num(key, value)?,
            "test_per_class" => synth(self, key)?.test_per_class = num(key, value)?,
            "image_size" => synth(self, key)?.image_size = num(key, value)?,
            "noise" => synth(self, key)?.noise = num(key, value)?,
            "train_cap" | "test_cap" => match &mut self.data {
                DataSource::Cifar10 {
                    train_cap, test_cap, ..
                } => {
                    let v = Some(num(key, value)?);
                    if key == "train_cap" {
                        *train_cap = v;
                    } else {
                        *test_cap = v;
                    }
                }
                DataSource::Synth(_) => return Err(Error::Config(format!("'{key}' applies to CIFAR-10 only"))),
            },
            "epochs" => self.train.epochs = num(key, value)?,
            "batch_size" => {
                self.train.batch_size = num(key, value)?;
                self.prune.batch_size = self.train.batch_size;
            }
            "lr" => self.train.lr = num(key, value)?,
            "momentum" => self.train.momentum = num(key, value)?,
            "weight_decay" => self.train.weight_decay = num(key, value)?,
            "hflip" => self.train.augment.hflip = flag(key, value)?,
            "crop_pad" => self.train.augment.crop_pad = num(key, value)?,
            "rate" => self.prune.rate = num(key, value)?,
            "alpha" => self.prune.weights.alpha = num(key, value)?,
            "beta" => self.prune.weights.beta = num(key, value)?,
            "eta" => self.prune.eta = num(key, value)?,
            "losses" => self.prune.enabled_losses = LossSet::parse(value)?,
            "selection_batches" => self.prune.selection_batches = num(key, value)?,
            "refit_epochs" => self.prune.refit_epochs = num(key, value)?,
            "finetune_epochs" => self.prune.finetune_epochs = num(key, value)?,
            "finetune_lr" => self.prune.finetune_lr = num(key, value)?,
            "divergence_factor" => {
                let f = num(key, value)?;
                self.prune.divergence_factor = f;
                self.train.divergence_factor = f;
            }
            "seed" => self.seed = num(key, value)?,
            "out" => self.out = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Checks value ranges and that referenced paths exist.
    pub fn validate(&self) -> Result<()> {
        LossWeights::new(self.prune.weights.alpha, self.prune.weights.beta)?;
        self.prune.validate()?;
        if self.widths.contains(&0) {
            return Err(Error::Config("widths must be positive".into()));
        }
        if self.train.batch_size == 0 || !(self.train.lr > 0.0) {
            return Err(Error::Config("batch_size and lr must be positive".into()));
        }
        match &self.data {
            DataSource::Synth(s) if s.image_size % 4 != 0 => Err(Error::Config(format!(
                "image_size must be a multiple of 4 for the reference network, got {}",
                s.image_size
            ))),
            DataSource::Cifar10 { dir, .. } if !dir.is_dir() => {
                Err(Error::Config(format!("data directory {} does not exist", dir.display())))
            }
            _ => Ok(()),
        }
    }

    /// Loads the dataset; synthetic data is generated with `seed`.
    pub fn dataset(&self, seed: u64) -> Result<Dataset> {
        match &self.data {
            DataSource::Synth(s) => data::synth(&SynthConfig { seed, ..*s }),
            DataSource::Cifar10 {
                dir,
                train_cap,
                test_cap,
            } => data::load_cifar10(dir, *train_cap, *test_cap),
        }
    }

    /// Same configuration with every seed-dependent component reseeded.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.train.seed = seed;
        c.prune.seed = seed;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_file_text() {
        let cfg = ExperimentConfig::parse(
            "# overrides\nrate = 0.5\nlosses = r,c  # no correlation\nalpha=0.01\nimage_size = 16\n",
        )
        .unwrap();
        assert_eq!(cfg.prune.rate, 0.5);
        assert_eq!(cfg.prune.weights.alpha, 0.01);
        assert_eq!(cfg.prune.enabled_losses, LossSet::parse("r,c").unwrap());
        assert!(matches!(cfg.data, DataSource::Synth(s) if s.image_size == 16));
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ExperimentConfig::parse("bogus = 1").is_err());
        assert!(ExperimentConfig::parse("rate 0.3").is_err());
        assert!(ExperimentConfig::parse("rate = abc").is_err());
        assert!(ExperimentConfig::parse("losses = ").is_err());
        let cfg = ExperimentConfig::parse("data = /definitely/not/here").unwrap();
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig::parse("rate = 1.5").unwrap();
        assert!(cfg.validate().is_err());
    }
}
