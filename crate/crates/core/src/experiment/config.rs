//! Experiment configuration, read from and archived as TOML.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::arch::BackboneConfig;
use crate::data::SynthConfig;
use crate::energy::EnergyConstants;
use crate::error::{Error, Result};
use crate::qcfs::Stage1Config;
use crate::stdp::{Stage2Config, EXC_RANGE, INH_RANGE, THETA_PLUS_RANGE};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// Synthetic generation and the stratified split.
    pub data: u64,
    /// Backbone/head initialisation and Stage-1 shuffling.
    pub stage1: u64,
    /// Classifier initialisation, Poisson encoding and batching.
    pub stage2: u64,
    /// Classifier seeds of the accuracy-vs-T_c sweep.
    pub sweep: Vec<u64>,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            data: 0,
            stage1: 0,
            stage2: 0,
            sweep: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FolderConfig {
    pub path: PathBuf,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
}

fn default_image_size() -> usize {
    224
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DatasetConfig {
    Synthetic(SynthConfig),
    Folder(FolderConfig),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic(SynthConfig::default())
    }
}

impl DatasetConfig {
    pub fn image_size(&self) -> usize {
        match self {
            DatasetConfig::Synthetic(s) => s.image_size,
            DatasetConfig::Folder(f) => f.image_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnnConfig {
    /// Backbone timesteps used to extract the classifier's input rates.
    pub feature_timesteps: usize,
    pub t_b_list: Vec<usize>,
    pub t_c_list: Vec<usize>,
}

impl Default for SnnConfig {
    fn default() -> Self {
        Self {
            feature_timesteps: 128,
            t_b_list: vec![16, 32, 64, 128, 256],
            t_c_list: vec![100, 200, 300],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpace {
    pub trials: usize,
    pub seed: u64,
    pub exc: [f32; 2],
    pub inh: [f32; 2],
    pub theta_plus: [f32; 2],
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            trials: 8,
            seed: 0,
            exc: [EXC_RANGE.0, EXC_RANGE.1],
            inh: [INH_RANGE.0, INH_RANGE.1],
            theta_plus: [THETA_PLUS_RANGE.0, THETA_PLUS_RANGE.1],
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("search.trials must be at least 1".into()));
        }
        for (name, [lo, hi]) in [("exc", self.exc), ("inh", self.inh), ("theta_plus", self.theta_plus)] {
            if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi) {
                return Err(Error::Config(format!(
                    "search.{name} must be a finite range [lo, hi] with 0 <= lo <= hi"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub seeds: Seeds,
    pub dataset: DatasetConfig,
    pub backbone: BackboneConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub snn: SnnConfig,
    pub energy: EnergyConstants,
    pub search: SearchSpace,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            seeds: Seeds::default(),
            dataset: DatasetConfig::default(),
            backbone: BackboneConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            snn: SnnConfig::default(),
            energy: EnergyConstants::default(),
            search: SearchSpace::default(),
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale preset: 4 synthetic classes, a small CNN trained for a
    /// few minutes on one core, and a 100-neuron classifier.
    pub fn toy() -> Self {
        Self {
            output_dir: PathBuf::from("runs/toy"),
            seeds: Seeds {
                data: 1,
                stage1: 1,
                stage2: 1,
                sweep: vec![1, 2, 3, 4, 5],
            },
            stage1: Stage1Config {
                epochs: 30,
                batch_size: 8,
                t_max: 30,
                levels: 16,
                head_hidden: 100,
                augment: false,
                ..Stage1Config::default()
            },
            stage2: Stage2Config {
                n_neurons: 100,
                ..Stage2Config::default()
            },
            snn: SnnConfig {
                t_c_list: vec![50, 100, 200, 300],
                ..SnnConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "default" => Ok(Self::default()),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected toy or default)"
            ))),
        }
    }

    /// Parses and validates a TOML document.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.energy.validate()?;
        self.search.validate()?;
        let image_size = self.dataset.image_size();
        if image_size == 0 {
            return Err(Error::Config("dataset.image_size must be positive".into()));
        }
        if let DatasetConfig::Synthetic(s) = &self.dataset {
            if s.n_classes < 2 || s.n_per_class == 0 {
                return Err(Error::Config(
                    "synthetic dataset needs n_classes >= 2 and n_per_class >= 1".into(),
                ));
            }
        }
        let ascending = |v: &[usize]| !v.is_empty() && v[0] > 0 && v.windows(2).all(|w| w[0] < w[1]);
        if self.snn.feature_timesteps == 0 || !ascending(&self.snn.t_b_list) || !ascending(&self.snn.t_c_list) {
            return Err(Error::Config(
                "snn.feature_timesteps must be positive and t_b_list/t_c_list strictly ascending positive lists".into(),
            ));
        }
        if self.seeds.sweep.is_empty() {
            return Err(Error::Config("seeds.sweep must list at least one seed".into()));
        }
        Ok(())
    }
}
