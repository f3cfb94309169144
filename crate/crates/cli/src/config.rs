//! Run settings: built-in defaults, then an optional TOML file, then flags.

use std::fs;
use std::path::Path;

use clap::{Args, ValueEnum};
use lama_core::model::{ModelConfig, Pooling};
use lama_core::ngram::DEFAULT_ORDER;
use lama_core::training::TrainConfig;
use serde::Deserialize;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    Lama,
    Ngram,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingArg {
    Last,
    Mean,
}

impl From<PoolingArg> for Pooling {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::Last => Pooling::Last,
            PoolingArg::Mean => Pooling::Mean,
        }
    }
}

/// Hyperparameter flags shared by `train`, `ablate` and `detect`. Every field
/// is optional so that unset flags fall through to the config file.
#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyper {
    /// Embedding size.
    #[arg(long)]
    pub d: Option<usize>,
    /// Attention heads per layer.
    #[arg(long)]
    pub heads: Option<usize>,
    /// Number of attention layers.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Feed-forward hidden size.
    #[arg(long)]
    pub ff: Option<usize>,
    /// Window length.
    #[arg(long)]
    pub window: Option<usize>,
    /// Number of candidates a true event must appear among.
    #[arg(long)]
    pub topk: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long, value_enum)]
    pub pooling: Option<PoolingArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub detector: Option<DetectorKind>,
    /// Context length of the n-gram baseline.
    #[arg(long)]
    pub ngram_order: Option<usize>,
    /// Share of normal sessions used for training.
    #[arg(long)]
    pub train_fraction: Option<f64>,
}

impl Hyper {
    /// Fills every unset field from `other`.
    pub fn or(self, other: Hyper) -> Hyper {
        Hyper {
            d: self.d.or(other.d),
            heads: self.heads.or(other.heads),
            layers: self.layers.or(other.layers),
            ff: self.ff.or(other.ff),
            window: self.window.or(other.window),
            topk: self.topk.or(other.topk),
            dropout: self.dropout.or(other.dropout),
            pooling: self.pooling.or(other.pooling),
            epochs: self.epochs.or(other.epochs),
            batch: self.batch.or(other.batch),
            lr: self.lr.or(other.lr),
            seed: self.seed.or(other.seed),
            detector: self.detector.or(other.detector),
            ngram_order: self.ngram_order.or(other.ngram_order),
            train_fraction: self.train_fraction.or(other.train_fraction),
        }
    }

    /// Flags first, then the config file at `path` if given.
    pub fn merged(self, path: Option<&Path>) -> Result<Hyper, CliError> {
        match path {
            None => Ok(self),
            Some(p) => Ok(self.or(load_config(p)?)),
        }
    }
}

pub fn load_config(path: &Path) -> Result<Hyper, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config file {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config file {}: {e}", path.display())))
}

/// Fully resolved settings for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// `num_events` is a placeholder until a vocabulary is built.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub detector: DetectorKind,
    pub ngram_order: usize,
    pub train_fraction: f64,
}

impl RunConfig {
    pub fn resolve(h: &Hyper) -> Result<RunConfig, CliError> {
        let base = ModelConfig::with_events(1);
        let model = ModelConfig {
            d_model: h.d.unwrap_or(base.d_model),
            heads: h.heads.unwrap_or(base.heads),
            layers: h.layers.unwrap_or(base.layers),
            d_ff: h.ff.unwrap_or(base.d_ff),
            window: h.window.unwrap_or(base.window),
            num_events: 1,
            top_k: h.topk.unwrap_or(base.top_k),
            dropout: h.dropout.unwrap_or(base.dropout),
            pooling: h.pooling.map_or(base.pooling, Pooling::from),
        };
        model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        let tbase = TrainConfig::default();
        let train = TrainConfig {
            epochs: h.epochs.unwrap_or(tbase.epochs),
            batch_size: h.batch.unwrap_or(tbase.batch_size),
            learning_rate: h.lr.unwrap_or(tbase.learning_rate),
            seed: h.seed.unwrap_or(tbase.seed),
            adam: tbase.adam,
        };
        train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        let ngram_order = h.ngram_order.unwrap_or(DEFAULT_ORDER);
        if ngram_order < 1 {
            return Err(CliError::Usage("--ngram-order must be >= 1".into()));
        }
        let train_fraction = h.train_fraction.unwrap_or(0.8);
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(CliError::Usage(format!("train fraction {train_fraction} not in (0, 1)")));
        }
        Ok(RunConfig {
            model,
            train,
            detector: h.detector.unwrap_or(DetectorKind::Lama),
            ngram_order,
            train_fraction,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_and_defaults_fill_the_rest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "d = 32\nheads = 4\nepochs = 2\ndetector = \"ngram\"\n").unwrap();
        let flags = Hyper {
            heads: Some(2),
            ..Hyper::default()
        };
        let h = flags.merged(Some(&path)).unwrap();
        let rc = RunConfig::resolve(&h).unwrap();
        assert_eq!(rc.model.d_model, 32);
        assert_eq!(rc.model.heads, 2);
        assert_eq!(rc.model.layers, 4);
        assert_eq!(rc.train.epochs, 2);
        assert_eq!(rc.train.batch_size, 128);
        assert_eq!(rc.detector, DetectorKind::Ngram);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        fs::write(&path, "d = 32\nlearning_rate = 0.1\n").unwrap();
        assert!(matches!(Hyper::default().merged(Some(&path)), Err(CliError::Usage(_))));
        let h = Hyper {
            d: Some(30),
            heads: Some(4),
            ..Hyper::default()
        };
        assert!(matches!(RunConfig::resolve(&h), Err(CliError::Usage(_))));
        let h = Hyper {
            train_fraction: Some(1.0),
            ..Hyper::default()
        };
        assert!(RunConfig::resolve(&h).is_err());
    }
}
