//! Seed-pinned desk-scale benchmark: a synthetic dataset, one stratified
//! cross-validation round and a small U-Net trained on it.

use serde::{Deserialize, Serialize};

use crate::data::{generate, stratified_folds, Dataset, SceneSpec, Split};
use crate::error::{Error, Result};
use crate::netgraph::{build_unet, train, LabeledCube, NetGraph, TrainConfig, TrainHistory, UnetConfig};
use crate::preprocess::ChannelStats;
use crate::pruning::IterationConfig;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeskConfig {
    pub samples: usize,
    pub seed: u64,
    pub folds: usize,
    /// Cross-validation round used for the train/val/test split.
    pub round: usize,
    pub unet: UnetConfig,
    pub train: TrainConfig,
    pub prune: IterationConfig,
}

impl Default for DeskConfig {
    fn default() -> Self {
        Self {
            samples: 200,
            seed: 0,
            folds: 5,
            round: 0,
            unet: UnetConfig {
                depth: 3,
                init_filters: 16,
                ..UnetConfig::default()
            },
            train: TrainConfig {
                epochs: 30,
                batch_size: 8,
                lr: 2e-3,
                patience: 10,
                ..TrainConfig::default()
            },
            // The small network recovers within a few epochs; the slow
            // full-scale finetune schedule would dominate the runtime.
            prune: IterationConfig {
                overall_pr: vec![0.5, 0.5],
                finetune: TrainConfig {
                    epochs: 15,
                    batch_size: 8,
                    lr: 1e-4,
                    patience: 5,
                    ..TrainConfig::default()
                },
                ..IterationConfig::default()
            },
        }
    }
}

/// Generated data plus the cubes of one split, normalized with statistics of
/// the training part only.
#[derive(Debug, Clone)]
pub struct DeskBench {
    pub config: DeskConfig,
    pub dataset: Dataset,
    pub split: Split,
    pub stats: ChannelStats,
    pub train: Vec<LabeledCube>,
    pub val: Vec<LabeledCube>,
    pub test: Vec<LabeledCube>,
}

impl DeskBench {
    pub fn prepare(config: &DeskConfig) -> Result<Self> {
        let spec = SceneSpec {
            classes: config.unet.classes,
            preprocess: crate::preprocess::PreprocessConfig {
                depth: config.unet.depth as u32,
                ..SceneSpec::desk().preprocess
            },
            ..SceneSpec::desk()
        };
        let dataset = generate(&spec, config.seed, config.samples)?;
        Self::from_dataset(config, dataset)
    }

    pub fn from_dataset(config: &DeskConfig, dataset: Dataset) -> Result<Self> {
        if dataset.classes != config.unet.classes {
            return Err(Error::InvalidArgument(format!(
                "dataset has {} classes, network {}",
                dataset.classes, config.unet.classes
            )));
        }
        let folds = stratified_folds(&dataset.label_planes(), dataset.classes, config.folds)?;
        let split = folds.round(config.round);
        let stats = dataset.clip_stats(&split.train)?;
        let train = dataset.labeled_cubes(&split.train, &stats, false)?;
        let val = dataset.labeled_cubes(&split.val, &stats, false)?;
        let test = dataset.labeled_cubes(&split.test, &stats, false)?;
        Ok(Self {
            config: config.clone(),
            dataset,
            split,
            stats,
            train,
            val,
            test,
        })
    }

    pub fn train_baseline(&self) -> Result<(NetGraph, TrainHistory)> {
        let mut g = build_unet(&self.config.unet, self.config.seed)?;
        let history = train(&mut g, &self.train, &self.val, &self.config.train)?;
        Ok((g, history))
    }

    /// Cubes of `indices` for a graph with the symmetric normalization fused in.
    pub fn fused_cubes(&self, indices: &[usize]) -> Result<Vec<Tensor>> {
        self.dataset.cubes(indices, Some(&self.stats), true)
    }
}
