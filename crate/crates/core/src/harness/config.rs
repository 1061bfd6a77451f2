use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocols::{Algorithm, Distill, ProtocolConfig};
use crate::targets::{FinetuneConfig, PretrainConfig};
use crate::tasks::{GaussianConfig, SinusoidConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    Sinusoid,
    Gaussian,
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Study::Sinusoid => "sinusoid",
            Study::Gaussian => "gaussian",
        })
    }
}

impl FromStr for Study {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sinusoid" => Ok(Study::Sinusoid),
            "gaussian" => Ok(Study::Gaussian),
            other => Err(Error::Config(format!("unknown study `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinusoidSettings {
    pub tasks: SinusoidConfig,
    pub train_tasks: usize,
    pub val_tasks: usize,
    pub test_tasks: usize,
    /// Shared embedding trunk; MAML adds a linear 100 → 1 head on top.
    pub embedding_dims: Vec<usize>,
}

impl Default for SinusoidSettings {
    fn default() -> Self {
        SinusoidSettings {
            tasks: SinusoidConfig::default(),
            train_tasks: 10_000,
            val_tasks: 500,
            test_tasks: 10_000,
            embedding_dims: vec![1, 64, 64, 100],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaussianSettings {
    pub data: GaussianConfig,
    pub n_way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
    pub train_tasks: usize,
    pub val_tasks: usize,
    pub test_tasks: usize,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    /// Relative-likelihood bound for biased evaluation; 1 means unbiased.
    pub eval_threshold: f64,
    pub max_retries: usize,
}

impl Default for GaussianSettings {
    fn default() -> Self {
        GaussianSettings {
            data: GaussianConfig::default(),
            n_way: 5,
            shot: 10,
            queries_per_class: 15,
            train_tasks: 10_000,
            val_tasks: 500,
            test_tasks: 10_000,
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            eval_threshold: 1.0,
            max_retries: 100,
        }
    }
}

/// Everything needed to reproduce a run. Serialized into every output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub study: Study,
    pub algorithm: Algorithm,
    pub protocol: ProtocolConfig,
    pub sinusoid: SinusoidSettings,
    pub gaussian: GaussianSettings,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl RunConfig {
    pub fn new(study: Study, algorithm: Algorithm) -> Self {
        let protocol = match study {
            Study::Sinusoid => ProtocolConfig::sinusoid(),
            Study::Gaussian => ProtocolConfig::gaussian(),
        };
        RunConfig {
            study,
            algorithm,
            protocol,
            sinusoid: SinusoidSettings::default(),
            gaussian: GaussianSettings::default(),
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.study, self.algorithm) {
            (Study::Sinusoid, Algorithm::Maml | Algorithm::Protoreg) | (Study::Gaussian, Algorithm::Protonet) => {}
            (s, a) => return Err(Error::Config(format!("algorithm {a} is not available for the {s} study"))),
        }
        match (self.study, self.protocol.distill) {
            (Study::Sinusoid, Distill::OutputKl) | (Study::Gaussian, Distill::OutputMse) => {
                return Err(Error::Config(format!(
                    "{:?} matching does not fit the {} study",
                    self.protocol.distill, self.study
                )))
            }
            _ => {}
        }
        self.protocol.validate()
    }

    /// Scales every episode and task count by `factor` (at least one of each).
    pub fn scaled(mut self, factor: f64) -> Self {
        let s = |n: usize| ((n as f64 * factor).round() as usize).max(1);
        self.protocol.episodes = s(self.protocol.episodes);
        self.protocol.lr_milestones = self
            .protocol
            .lr_milestones
            .iter()
            .map(|&m| ((m as f64 * factor).round() as u64).max(1))
            .collect();
        self.protocol.target_count = self.protocol.target_count.map(s);
        self.sinusoid.train_tasks = s(self.sinusoid.train_tasks);
        self.sinusoid.test_tasks = s(self.sinusoid.test_tasks);
        self.gaussian.train_tasks = s(self.gaussian.train_tasks);
        self.gaussian.test_tasks = s(self.gaussian.test_tasks);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compatibility_rules() {
        assert!(RunConfig::new(Study::Sinusoid, Algorithm::Maml).validate().is_ok());
        assert!(RunConfig::new(Study::Sinusoid, Algorithm::Protoreg).validate().is_ok());
        assert!(RunConfig::new(Study::Gaussian, Algorithm::Protonet).validate().is_ok());
        assert!(RunConfig::new(Study::Sinusoid, Algorithm::Protonet).validate().is_err());
        assert!(RunConfig::new(Study::Gaussian, Algorithm::Protoreg).validate().is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = RunConfig::new(Study::Gaussian, Algorithm::Protonet);
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn scaling_keeps_counts_positive() {
        let c = RunConfig::new(Study::Sinusoid, Algorithm::Maml).scaled(0.2);
        assert_eq!(c.protocol.episodes, 2000);
        assert_eq!(c.protocol.lr_milestones, vec![800, 1200, 1600]);
        assert_eq!(c.sinusoid.val_tasks, 500);
    }
}
