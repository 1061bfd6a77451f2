//! Training objectives and the meta-train / meta-eval loops.
//!
//! Under the support/query (S/Q) protocol a solver built from the support set
//! is scored on the query set. Under the support/target (S/T) protocol it is
//! scored on the support set itself against a blend of labels and a target
//! model's outputs. The mixed objective uses S/T for tasks that have a target
//! and S/Q for the rest.

mod denoise;
mod losses;
mod objective;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use denoise::{denoise_bound_check, run_denoise_check, DenoiseCheck, DenoiseReport};
pub use losses::{
    cross_entropy_sum, kl_divergence, squared_error_sum, st_classification_loss, st_loss_param, st_regression_loss,
    BlendedSquaredError, PROB_FLOOR,
};
pub use objective::{
    episode_gradient, mixed_objective, sq_loss, st_loss_output, AnalyticTeacher, BayesTeacher, CachedTeacher,
    LabeledSet, TaskRef, Teacher, TeacherSource,
};
pub use train::{eval_task, meta_eval, meta_train, EvalSummary, MetricsRecord, Stat, TaskMetrics, TrainOutcome, METRICS_SCHEMA};

use crate::error::{Error, Result};
use crate::hardness::SelectionMode;
use crate::numerics::{InnerOrder, LrSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Maml,
    Protonet,
    Protoreg,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Maml => "maml",
            Algorithm::Protonet => "protonet",
            Algorithm::Protoreg => "protoreg",
        })
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maml" => Ok(Algorithm::Maml),
            "protonet" => Ok(Algorithm::Protonet),
            "protoreg" => Ok(Algorithm::Protoreg),
            other => Err(Error::Config(format!("unknown algorithm `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    #[default]
    Sq,
    St,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Sq => "sq",
            Protocol::St => "st",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sq" => Ok(Protocol::Sq),
            "st" => Ok(Protocol::St),
            other => Err(Error::Config(format!("unknown protocol `{other}`"))),
        }
    }
}

/// How a solver is matched to its target under S/T.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distill {
    OutputMse,
    OutputKl,
    ParamL2,
}

/// How per-instance losses within one episode are combined into the
/// quantity that is differentiated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub protocol: Protocol,
    pub lambda: f64,
    pub distill: Distill,
    /// Fraction of meta-training tasks that get a target under S/T.
    pub target_ratio: f64,
    /// Absolute number of targets; overrides `target_ratio` when set.
    pub target_count: Option<usize>,
    pub hardness_metric: String,
    pub selection: SelectionMode,
    pub episodes: usize,
    pub val_every: usize,
    pub val_tasks: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_milestones: Vec<u64>,
    pub lr_decay: f64,
    pub max_grad_norm: Option<f64>,
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub inner_order: InnerOrder,
    pub reduction: Reduction,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            protocol: Protocol::Sq,
            lambda: 0.5,
            distill: Distill::OutputMse,
            target_ratio: 1.0,
            target_count: None,
            hardness_metric: "a_minus_b".into(),
            selection: SelectionMode::Hardness,
            episodes: 10_000,
            val_every: 500,
            val_tasks: 500,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_milestones: vec![4000, 6000, 8000],
            lr_decay: 0.8,
            max_grad_norm: None,
            inner_lr: 0.01,
            inner_steps: 1,
            inner_order: InnerOrder::Second,
            reduction: Reduction::Mean,
            seed: 0,
        }
    }
}

impl ProtocolConfig {
    /// Defaults for the sinusoid regression study. Gradients are clipped at
    /// norm 10: without it second-order MAML diverges within the first hundred
    /// episodes at this learning rate and momentum.
    pub fn sinusoid() -> Self {
        ProtocolConfig {
            max_grad_norm: Some(10.0),
            ..Self::default()
        }
    }

    /// Defaults for the Gaussian classification study.
    pub fn gaussian() -> Self {
        ProtocolConfig {
            lambda: 0.8,
            distill: Distill::OutputKl,
            target_ratio: 0.1,
            hardness_metric: "similarity_sum".into(),
            learning_rate: 0.001,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        losses::check_lambda(self.lambda)?;
        if !(0.0..=1.0).contains(&self.target_ratio) {
            return Err(Error::Config(format!("target ratio {} outside [0, 1]", self.target_ratio)));
        }
        if self.protocol == Protocol::St && self.distill == Distill::ParamL2 {
            return Err(Error::Config(
                "param_l2 matching needs a target with the solver's parameter shape, which no target source provides"
                    .into(),
            ));
        }
        if self.val_every == 0 {
            return Err(Error::Config("validation cadence must be positive".into()));
        }
        if !(self.inner_lr >= 0.0) {
            return Err(Error::Config(format!("inner learning rate {} is negative", self.inner_lr)));
        }
        if !(self.lr_decay > 0.0) {
            return Err(Error::Config(format!("learning-rate decay {} must be positive", self.lr_decay)));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::step_decay(&self.lr_milestones, self.lr_decay)
    }

    /// Number of tasks that receive a target among `n` meta-training tasks.
    pub fn targets_for(&self, n: usize) -> usize {
        match self.protocol {
            Protocol::Sq => 0,
            Protocol::St => self
                .target_count
                .unwrap_or_else(|| (self.target_ratio * n as f64).round() as usize)
                .min(n),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ProtocolConfig::sinusoid().validate().is_ok());
        assert!(ProtocolConfig::gaussian().validate().is_ok());
        let bad = ProtocolConfig {
            lambda: 1.2,
            ..ProtocolConfig::default()
        };
        assert!(bad.validate().is_err());
        let param = ProtocolConfig {
            protocol: Protocol::St,
            distill: Distill::ParamL2,
            ..ProtocolConfig::default()
        };
        assert!(matches!(param.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn target_counts() {
        let mut c = ProtocolConfig {
            protocol: Protocol::St,
            target_ratio: 0.05,
            ..ProtocolConfig::default()
        };
        assert_eq!(c.targets_for(10_000), 500);
        c.target_count = Some(2000);
        assert_eq!(c.targets_for(10_000), 2000);
        c.protocol = Protocol::Sq;
        assert_eq!(c.targets_for(10_000), 0);
    }

    #[test]
    fn schedule_matches_milestones() {
        let s = ProtocolConfig::default().schedule();
        assert_eq!(s.multiplier(3999), 1.0);
        assert!((s.multiplier(8000) - 0.512).abs() < 1e-15);
    }

    #[test]
    fn names_round_trip() {
        for a in ["maml", "protonet", "protoreg"] {
            assert_eq!(a.parse::<Algorithm>().unwrap().to_string(), a);
        }
        for p in ["sq", "st"] {
            assert_eq!(p.parse::<Protocol>().unwrap().to_string(), p);
        }
    }
}
