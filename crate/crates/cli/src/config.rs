//! Run configuration: a JSON file merged with command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use dietcnn::calibrate::CalibConfig;
use dietcnn::model::DietLayout;
use dietcnn::trainer::{FinetuneConfig, Loss, TrainConfig};
use dietcnn::FoldOrder;
use serde::{Deserialize, Serialize};

use crate::ConfigError;

pub const DATA_ENV: &str = "DIETCNN_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data_dir: Option<PathBuf>,
    pub n_clusters: usize,
    pub n_cfilters: usize,
    pub n_ffilters: usize,
    pub calib_images: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
    pub fold_order: String,
    pub activation: String,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Leading training images used by `train` (all when unset).
    pub train_images: Option<usize>,
    pub loss: Loss,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub finetune_images: Option<usize>,
    pub refit_every: usize,
    /// Test images used by evaluation commands (all when unset).
    pub limit: Option<usize>,
    pub diet_layout: Option<DietLayout>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let calib = CalibConfig::default();
        let train = TrainConfig::default();
        Self {
            data_dir: None,
            n_clusters: calib.n_clusters,
            n_cfilters: calib.n_cfilters,
            n_ffilters: calib.n_ffilters,
            calib_images: calib.calib_images,
            kmeans_iters: calib.max_iters,
            seed: 0,
            fold_order: "raster".into(),
            activation: "relu".into(),
            lr: train.lr,
            batch_size: train.batch_size,
            epochs: train.epochs,
            train_images: None,
            loss: train.loss,
            finetune_epochs: 0,
            finetune_lr: 0.01,
            finetune_images: None,
            refit_every: 50,
            limit: None,
            diet_layout: None,
        }
    }
}

/// Flags shared by every command; each one overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// MNIST directory (defaults to $DIETCNN_DATA_DIR, then data/mnist).
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub n_clusters: Option<usize>,
    #[arg(long, global = true)]
    pub n_cfilters: Option<usize>,
    #[arg(long, global = true)]
    pub n_ffilters: Option<usize>,
    #[arg(long, global = true)]
    pub calib_images: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// raster, ascending or random:<seed>.
    #[arg(long, global = true)]
    pub fold_order: Option<String>,
    #[arg(long, global = true)]
    pub limit: Option<usize>,
    /// JSON file holding a diet layout (per-layer stride/padding/drop).
    #[arg(long, global = true)]
    pub layout: Option<PathBuf>,
}

macro_rules! set {
    ($cfg:ident, $ov:ident, $($field:ident),*) => {
        $(if let Some(v) = $ov.$field.clone() { $cfg.$field = v.into(); })*
    };
}

impl RunConfig {
    pub fn load(ov: &Overrides) -> Result<Self> {
        let mut cfg = match &ov.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&text)
                    .map_err(|e| ConfigError(format!("config {}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        set!(
            cfg,
            ov,
            n_clusters,
            n_cfilters,
            n_ffilters,
            calib_images,
            seed,
            fold_order
        );
        if ov.data_dir.is_some() {
            cfg.data_dir = ov.data_dir.clone();
        }
        if ov.limit.is_some() {
            cfg.limit = ov.limit;
        }
        if let Some(path) = &ov.layout {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading layout {}", path.display()))?;
            let layout: DietLayout = serde_json::from_str(&text)
                .map_err(|e| ConfigError(format!("layout {}: {e}", path.display())))?;
            cfg.diet_layout = Some(layout);
        }
        cfg.fold_order()?;
        Ok(cfg)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
            .unwrap_or_else(|| Path::new("data/mnist").to_path_buf())
    }

    pub fn fold_order(&self) -> Result<FoldOrder> {
        Ok(self.fold_order.parse()?)
    }

    pub fn calib(&self) -> CalibConfig {
        CalibConfig {
            n_clusters: self.n_clusters,
            n_cfilters: self.n_cfilters,
            n_ffilters: self.n_ffilters,
            calib_images: self.calib_images,
            seed: self.seed,
            max_iters: self.kmeans_iters,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            loss: self.loss,
            seed: self.seed,
            refit_every: self.refit_every,
        }
    }

    pub fn finetune(&self) -> Result<FinetuneConfig> {
        Ok(FinetuneConfig {
            train: TrainConfig {
                lr: self.finetune_lr,
                epochs: self.finetune_epochs.max(1),
                ..self.train()
            },
            calib: self.calib(),
            order: self.fold_order()?,
            ..FinetuneConfig::default()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(
            &path,
            r#"{"n_clusters": 64, "seed": 7, "fold_order": "ascending"}"#,
        )
        .unwrap();
        let ov = Overrides {
            config: Some(path),
            n_clusters: Some(128),
            ..Default::default()
        };
        let cfg = RunConfig::load(&ov).unwrap();
        assert_eq!(cfg.n_clusters, 128);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.fold_order().unwrap(), FoldOrder::ValueAscending);
        assert_eq!(cfg.n_cfilters, 256);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"n_clusterz": 64}"#).unwrap();
        let ov = Overrides {
            config: Some(path),
            ..Default::default()
        };
        assert!(RunConfig::load(&ov).is_err());
    }
}
