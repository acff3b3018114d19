//! Training settings with layered resolution: flags over config file over
//! preset over built-in defaults.

use std::path::Path;

use an2vec::loss::LossConfig;
use an2vec::model::{AdjacencyDecoder, DimensionSplit, FeatureHead, ModelConfig};
use an2vec::train::TrainConfig;
use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::usage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Train on the whole graph.
    Full,
    /// Hold out edges for ranking.
    Linkpred,
    /// Hold out nodes for classification.
    Nodeclass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Synthetic comparison setup: 1000 epochs, H 50, K 5.
    Synthetic,
    /// Citation benchmarks: 200 epochs, H 32, 16 dimensions per task.
    Citation,
}

/// Every tunable of a training run; `None` means "not set at this layer".
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    /// Adjacency-only embedding dimensions.
    #[arg(long)]
    pub f_a: Option<usize>,
    /// Shared embedding dimensions.
    #[arg(long)]
    pub f_ax: Option<usize>,
    /// Feature-only embedding dimensions.
    #[arg(long)]
    pub f_x: Option<usize>,
    /// Encoder hidden width.
    #[arg(long)]
    pub hidden_enc: Option<usize>,
    /// Decoder hidden width.
    #[arg(long)]
    pub hidden_dec: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Monte-Carlo samples per epoch.
    #[arg(long = "k")]
    pub k: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub decoder: Option<AdjacencyDecoder>,
    #[arg(long)]
    pub feature_head: Option<FeatureHead>,
    #[arg(long)]
    pub kappa_kl: Option<f64>,
    #[arg(long)]
    pub kappa_theta: Option<f64>,
    #[arg(long)]
    pub clip_eps: Option<f64>,
    /// Include the i = j terms in the adjacency loss.
    #[arg(long)]
    pub include_diagonal: Option<bool>,
    /// Renormalize multinomial targets to probability rows.
    #[arg(long)]
    pub normalize_feature_targets: Option<bool>,
    #[arg(long, value_enum)]
    pub task: Option<Task>,
    /// Fraction of edges held out for link prediction.
    #[arg(long)]
    pub test_frac: Option<f64>,
    /// Fraction of nodes used for training in node classification.
    #[arg(long)]
    pub train_frac: Option<f64>,
    /// Seed of the edge or node split (defaults to --seed).
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Also record the noise-free loss each epoch.
    #[arg(long)]
    pub track_mean_loss: Option<bool>,
}

macro_rules! overlay_fields {
    ($base:expr, $top:expr, $($f:ident),*) => {
        TrainSettings { $($f: $top.$f.or($base.$f)),* }
    };
}

impl TrainSettings {
    /// Field-wise: `top` wins wherever it is set.
    pub fn overlay(&self, top: &TrainSettings) -> TrainSettings {
        overlay_fields!(
            self, top, f_a, f_ax, f_x, hidden_enc, hidden_dec, epochs, k, lr, seed, decoder,
            feature_head, kappa_kl, kappa_theta, clip_eps, include_diagonal,
            normalize_feature_targets, task, test_frac, train_frac, split_seed, track_mean_loss
        )
    }

    pub fn defaults() -> TrainSettings {
        let loss = LossConfig::default();
        TrainSettings {
            f_a: Some(0),
            f_ax: Some(10),
            f_x: Some(0),
            hidden_enc: Some(50),
            hidden_dec: Some(50),
            epochs: Some(1000),
            k: Some(5),
            lr: Some(0.01),
            seed: Some(0),
            decoder: Some(AdjacencyDecoder::Deep),
            feature_head: None,
            kappa_kl: Some(loss.kappa_kl),
            kappa_theta: Some(loss.kappa_theta),
            clip_eps: Some(loss.clip_eps),
            include_diagonal: Some(loss.include_diagonal),
            normalize_feature_targets: Some(loss.normalize_feature_targets),
            task: Some(Task::Full),
            test_frac: Some(0.15),
            train_frac: Some(0.5),
            split_seed: None,
            track_mean_loss: Some(true),
        }
    }

    pub fn preset(p: Preset) -> TrainSettings {
        match p {
            Preset::Synthetic => TrainSettings::default(),
            Preset::Citation => TrainSettings {
                f_a: Some(0),
                f_ax: Some(16),
                f_x: Some(0),
                hidden_enc: Some(32),
                hidden_dec: Some(32),
                epochs: Some(200),
                k: Some(1),
                lr: Some(0.01),
                ..TrainSettings::default()
            },
        }
    }

    pub fn from_file(path: &Path) -> Result<TrainSettings> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| usage!("config {} is invalid: {e}", path.display()))
    }

    /// Stacks the layers and fills anything still unset from the defaults.
    pub fn layered(
        preset: Option<Preset>,
        config: Option<&Path>,
        flags: &TrainSettings,
    ) -> Result<TrainSettings> {
        let mut s = TrainSettings::defaults();
        if let Some(p) = preset {
            s = s.overlay(&TrainSettings::preset(p));
        }
        if let Some(path) = config {
            s = s.overlay(&TrainSettings::from_file(path)?);
        }
        Ok(s.overlay(flags))
    }

    /// Concrete configuration; `default_head` applies when no layer set one.
    pub fn resolve(&self, features: usize, default_head: FeatureHead) -> Result<ResolvedTrain> {
        let need = |v: Option<usize>, name: &str| v.ok_or_else(|| usage!("{name} is unset"));
        let split = DimensionSplit::new(
            need(self.f_a, "f_a")?,
            need(self.f_ax, "f_ax")?,
            need(self.f_x, "f_x")?,
        )
        .map_err(|e| usage!("{e}"))?;
        let seed = self.seed.unwrap_or(0);
        let train = TrainConfig {
            model: ModelConfig {
                split,
                features,
                hidden_enc: need(self.hidden_enc, "hidden_enc")?,
                hidden_dec: need(self.hidden_dec, "hidden_dec")?,
                decoder: self.decoder.unwrap_or(AdjacencyDecoder::Deep),
                head: self.feature_head.unwrap_or(default_head),
            },
            loss: LossConfig {
                kappa_kl: self.kappa_kl.unwrap_or(1000.0),
                kappa_theta: self.kappa_theta.unwrap_or(500.0),
                clip_eps: self.clip_eps.unwrap_or(1e-7),
                include_diagonal: self.include_diagonal.unwrap_or(true),
                normalize_feature_targets: self.normalize_feature_targets.unwrap_or(false),
            },
            epochs: need(self.epochs, "epochs")?,
            k_samples: need(self.k, "k")?,
            lr: self.lr.unwrap_or(0.01),
            seed,
            track_mean_loss: self.track_mean_loss.unwrap_or(true),
        };
        train.validate().map_err(|e| usage!("{e}"))?;
        let resolved = ResolvedTrain {
            train,
            task: self.task.unwrap_or(Task::Full),
            test_frac: self.test_frac.unwrap_or(0.15),
            train_frac: self.train_frac.unwrap_or(0.5),
            split_seed: self.split_seed.unwrap_or(seed),
        };
        for (name, v) in [("test_frac", resolved.test_frac), ("train_frac", resolved.train_frac)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(usage!("{name} must lie in (0, 1), got {v}"));
            }
        }
        Ok(resolved)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedTrain {
    pub train: TrainConfig,
    pub task: Task,
    pub test_frac: f64,
    pub train_frac: f64,
    pub split_seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        std::fs::write(&cfg, r#"{"epochs": 7, "lr": 0.5}"#).unwrap();
        let flags = TrainSettings { lr: Some(0.25), ..Default::default() };
        let s = TrainSettings::layered(Some(Preset::Citation), Some(&cfg), &flags).unwrap();
        assert_eq!(s.epochs, Some(7));
        assert_eq!(s.lr, Some(0.25));
        assert_eq!(s.hidden_enc, Some(32));
        assert_eq!(s.k, Some(1));
        let r = s.resolve(10, FeatureHead::Bernoulli).unwrap();
        assert_eq!(r.train.model.split, DimensionSplit::new(0, 16, 0).unwrap());
        assert_eq!(r.train.model.head, FeatureHead::Bernoulli);
    }

    #[test]
    fn defaults_match_comparison_setup() {
        let r = TrainSettings::layered(None, None, &TrainSettings::default())
            .unwrap()
            .resolve(5, FeatureHead::Multinomial)
            .unwrap();
        assert_eq!((r.train.epochs, r.train.k_samples, r.train.lr), (1000, 5, 0.01));
        assert_eq!((r.train.model.hidden_enc, r.train.model.hidden_dec), (50, 50));
    }

    #[test]
    fn unknown_config_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        std::fs::write(&cfg, r#"{"epoch": 7}"#).unwrap();
        assert!(TrainSettings::from_file(&cfg).is_err());
    }
}
