//! Run configuration shared by every subcommand.
//!
//! The file is TOML. Any key left out keeps its default, also inside nested
//! tables, so a file only needs the values it changes. Unknown keys are
//! errors. `hsicomp show-config` prints the effective configuration with
//! every default filled in.

use std::path::{Path, PathBuf};

use hsicomp::bench::DeskConfig;
use hsicomp::data::SceneSpec;
use hsicomp::netgraph::{TrainConfig, UnetConfig};
use hsicomp::pipeline::PipelineConfig;
use hsicomp::pruning::IterationConfig;
use hsicomp::quantization::QuantPolicy;
use hsicomp::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds data generation, weight initialization and batch order.
    pub seed: u64,
    pub paths: Paths,
    /// Generator settings for `gen-data`, including the preprocessing
    /// geometry written into the dataset manifest.
    pub scene: SceneSpec,
    pub data: DataConfig,
    pub unet: UnetConfig,
    pub train: TrainConfig,
    pub prune: IterationConfig,
    pub quant: QuantConfig,
    pub bench: BenchConfig,
}

/// Unset paths fall back to the conventional locations inside the workdir.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub workdir: Option<PathBuf>,
    /// Default `<workdir>/dataset`.
    pub dataset: Option<PathBuf>,
    /// Default `<workdir>/model`.
    pub model: Option<PathBuf>,
    /// Quantization table used by `eval` and `bench`; none means float.
    pub calib: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Images written by `gen-data`.
    pub samples: usize,
    pub folds: usize,
    /// Cross-validation round: tests on fold `round`, validates on the next.
    pub round: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    pub policy: QuantPolicy,
    pub cle_passes: usize,
    /// Training images used for calibration.
    pub calib_samples: usize,
    /// Fuse the symmetric input normalization into the graph first.
    pub fuse_normalization: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    /// Stage plans to measure.
    pub stages: Vec<usize>,
    /// Distinct raw frames cycled through by the pipeline.
    pub frames: usize,
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let desk = DeskConfig::default();
        Self {
            seed: desk.seed,
            paths: Paths::default(),
            scene: SceneSpec::desk(),
            data: DataConfig {
                samples: desk.samples,
                folds: desk.folds,
                round: desk.round,
            },
            unet: desk.unet,
            train: desk.train,
            prune: desk.prune,
            quant: QuantConfig {
                policy: QuantPolicy::default(),
                cle_passes: 4,
                calib_samples: 30,
                fuse_normalization: false,
            },
            bench: BenchConfig {
                stages: vec![1, 2, 3],
                frames: 20,
                pipeline: PipelineConfig::default(),
            },
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let parse = |message: &str| Error::Parse {
            location: origin.to_string(),
            message: message.to_string(),
        };
        let over: toml::Table = toml::from_str(text).map_err(|e| parse(e.message()))?;
        let mut base = toml::Table::try_from(Self::default()).expect("defaults serialize");
        merge(&mut base, over);
        let cfg: Self = base.try_into().map_err(|e: toml::de::Error| parse(e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_text(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.prune.validate()?;
        if self.data.folds < 3 {
            return Err(Error::InvalidArgument(format!("data.folds must be at least 3, got {}", self.data.folds)));
        }
        if self.data.round >= self.data.folds {
            return Err(Error::InvalidArgument(format!(
                "data.round {} out of range for {} folds",
                self.data.round, self.data.folds
            )));
        }
        if let Some(&s) = self.bench.stages.iter().find(|&&s| !(1..=3).contains(&s)) {
            return Err(Error::InvalidArgument(format!("bench.stages entry {s} outside 1..=3")));
        }
        if self.bench.frames == 0 {
            return Err(Error::InvalidArgument("bench.frames must be positive".into()));
        }
        Ok(())
    }

    /// `--seed` pins every random stream at once.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.prune.finetune.seed = seed;
    }

    pub fn desk(&self) -> DeskConfig {
        DeskConfig {
            samples: self.data.samples,
            seed: self.seed,
            folds: self.data.folds,
            round: self.data.round,
            unet: self.unet.clone(),
            train: self.train.clone(),
            prune: self.prune.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(RunConfig::from_text("", "t").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_tables_keep_other_defaults() {
        let c = RunConfig::from_text("[scene]\nnoise_sigma = 0.01\n[train]\nepochs = 3\n", "t").unwrap();
        assert_eq!(c.scene.noise_sigma, 0.01);
        assert_eq!(c.scene.frame, SceneSpec::desk().frame);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.lr, RunConfig::default().train.lr);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::from_text("[train]\nepoch = 3\n", "cfg.toml").unwrap_err();
        assert!(matches!(e, Error::Parse { .. }), "{e}");
        assert!(e.to_string().contains("epoch"), "{e}");
        assert!(RunConfig::from_text("sed = 1\n", "t").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_text("[prune]\noverall_pr = [1.5]\n", "t").is_err());
        assert!(RunConfig::from_text("[bench]\nstages = [4]\n", "t").is_err());
        assert!(RunConfig::from_text("[data]\nround = 5\n", "t").is_err());
    }

    #[test]
    fn printed_config_parses_back() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_text(&c.to_text(), "t").unwrap(), c);
    }

    #[test]
    fn seed_reaches_every_stream() {
        let mut c = RunConfig::default();
        c.set_seed(9);
        assert_eq!((c.seed, c.train.seed, c.prune.finetune.seed), (9, 9, 9));
        assert_eq!(c.desk().seed, 9);
    }
}
