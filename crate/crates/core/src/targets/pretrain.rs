use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{TargetKind, TargetModel};
use crate::error::{Error, Result};
use crate::numerics::{
    backprop_with_input_grad, sgd_step, Activation, Gradient, LrSchedule, Matrix, MlpModel, OptimizerState, OutputLoss,
    SoftTargetCrossEntropy,
};
use crate::tasks::{GaussianDataset, Split};
use crate::util::{derive_seed, rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub trunk_dims: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Stop once the epoch loss has failed to improve by `plateau_tol`
    /// (relative) for this many consecutive epochs.
    pub plateau_patience: usize,
    pub plateau_tol: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            trunk_dims: vec![2, 64, 64, 100],
            epochs: 50,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            plateau_patience: 5,
            plateau_tol: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub epoch_loss: Vec<f64>,
    pub train_accuracy: f64,
    pub early_stopped: bool,
}

/// Backbone trained with cross-entropy over every meta-train class.
/// Head row `r` scores class `class_ids[r]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainedModel {
    pub trunk: MlpModel,
    pub head: MlpModel,
    pub class_ids: Vec<usize>,
    pub config: PretrainConfig,
    pub log: PretrainLog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 3,
            batch_size: 64,
            learning_rate: 2e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
        }
    }
}

/// Trunk plus linear head, trained jointly.
struct Classifier {
    trunk: MlpModel,
    head: MlpModel,
    trunk_opt: OptimizerState,
    head_opt: OptimizerState,
}

impl Classifier {
    fn new(trunk: MlpModel, head: MlpModel, lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        let trunk_opt = OptimizerState::new(trunk.num_params(), lr, momentum, weight_decay)?;
        let head_opt = OptimizerState::new(head.num_params(), lr, momentum, weight_decay)?;
        Ok(Classifier {
            trunk,
            head,
            trunk_opt,
            head_opt,
        })
    }

    /// One SGD step on the batch-mean cross-entropy; returns that mean.
    fn step(&mut self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        let feats = self.trunk.forward(x)?;
        let logits = self.head.forward(&feats)?;
        let loss = SoftTargetCrossEntropy::hard(labels, self.head.output_dim());
        let (value, mut d_logits) = loss.evaluate(&logits);
        let scale = 1.0 / labels.len() as f64;
        d_logits.data_mut().iter_mut().for_each(|g| *g *= scale);
        let (head_grad, d_feats) = backprop_with_input_grad(&self.head, &feats, d_logits)?;
        let (trunk_grad, _) = backprop_with_input_grad(&self.trunk, x, d_feats)?;
        let mean = value * scale;
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!("classifier loss {mean}")));
        }
        sgd_step(&mut self.head, &Gradient { values: head_grad, loss: mean }, &mut self.head_opt)?;
        sgd_step(&mut self.trunk, &Gradient { values: trunk_grad, loss: mean }, &mut self.trunk_opt)?;
        Ok(mean)
    }

    fn epoch(&mut self, xs: &[[f64; 2]], labels: &[usize], batch: usize, order: &mut [usize], r: &mut crate::util::Rng) -> Result<f64> {
        order.shuffle(r);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let bx: Vec<[f64; 2]> = chunk.iter().map(|&i| xs[i]).collect();
            let by: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            total += self.step(&Matrix::from_rows(&bx)?, &by)? * chunk.len() as f64;
        }
        Ok(total / xs.len() as f64)
    }

    fn accuracy(&self, xs: &[[f64; 2]], labels: &[usize]) -> Result<f64> {
        let logits = self.head.forward(&self.trunk.forward(&Matrix::from_rows(xs)?)?)?;
        let hits = logits
            .iter_rows()
            .zip(labels)
            .filter(|(row, &l)| super::first_argmax(row) == l)
            .count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

fn labelled_pool(dataset: &GaussianDataset, class_ids: &[usize]) -> Result<(Vec<[f64; 2]>, Vec<usize>)> {
    let mut xs = Vec::new();
    let mut labels = Vec::new();
    for (n, &id) in class_ids.iter().enumerate() {
        for x in dataset.episode_pool(id)? {
            xs.push(*x);
            labels.push(n);
        }
    }
    Ok((xs, labels))
}

/// Mini-batch cross-entropy training of trunk and head on every meta-train
/// instance outside the auxiliary holdout.
pub fn pretrain(dataset: &GaussianDataset, cfg: &PretrainConfig) -> Result<PretrainedModel> {
    let class_ids = dataset.class_ids(Split::MetaTrain);
    if class_ids.is_empty() {
        return Err(Error::Config("dataset has no meta-train classes".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let feat = *cfg.trunk_dims.last().ok_or_else(|| Error::Config("empty trunk".into()))?;
    let trunk = MlpModel::init(&cfg.trunk_dims, derive_seed(cfg.seed, 1))?;
    let head = MlpModel::init_with(&[feat, class_ids.len()], Activation::Identity, derive_seed(cfg.seed, 2))?;
    let mut clf = Classifier::new(trunk, head, cfg.learning_rate, cfg.momentum, cfg.weight_decay)?;
    let (xs, labels) = labelled_pool(dataset, &class_ids)?;
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut r = rng(derive_seed(cfg.seed, 3));
    let mut epoch_loss = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut early_stopped = false;
    for epoch in 0..cfg.epochs {
        let loss = clf.epoch(&xs, &labels, cfg.batch_size, &mut order, &mut r).inspect_err(|e| {
            log::error!("pretraining diverged in epoch {epoch}: {e}");
        })?;
        log::debug!("pretrain epoch {epoch}: loss {loss:.5}");
        epoch_loss.push(loss);
        if loss < best * (1.0 - cfg.plateau_tol) {
            best = loss;
            stale = 0;
        } else {
            stale += 1;
            if cfg.plateau_patience > 0 && stale >= cfg.plateau_patience {
                early_stopped = true;
                break;
            }
        }
    }
    let train_accuracy = clf.accuracy(&xs, &labels)?;
    log::info!(
        "pretraining finished after {} epochs: loss {:.4}, train accuracy {:.4}",
        epoch_loss.len(),
        epoch_loss.last().copied().unwrap_or(f64::NAN),
        train_accuracy
    );
    Ok(PretrainedModel {
        trunk: clf.trunk,
        head: clf.head,
        class_ids,
        config: cfg.clone(),
        log: PretrainLog {
            epoch_loss,
            train_accuracy,
            early_stopped,
        },
    })
}

impl PretrainedModel {
    /// Head rows of the given classes, in the given order.
    pub fn head_rows(&self, class_ids: &[usize]) -> Result<Vec<usize>> {
        class_ids
            .iter()
            .map(|id| {
                self.class_ids
                    .iter()
                    .position(|c| c == id)
                    .ok_or_else(|| Error::Config(format!("class {id} was not seen during pretraining")))
            })
            .collect()
    }
}

/// The pretrained network restricted to the given classes, without fine-tuning.
pub fn sliced_target(pre: &PretrainedModel, class_ids: &[usize]) -> Result<TargetModel> {
    let head = pre.head.select_outputs(&pre.head_rows(class_ids)?)?;
    Ok(TargetModel {
        kind: TargetKind::FineTunedNet {
            trunk: pre.trunk.clone(),
            head,
            class_ids: class_ids.to_vec(),
        },
        provenance: "pretrained, sliced head".into(),
    })
}

/// Copies the trunk, slices the head to the episode classes and fine-tunes both
/// on every training instance of those classes.
pub fn finetune_target(pre: &PretrainedModel, dataset: &GaussianDataset, class_ids: &[usize], cfg: &FinetuneConfig) -> Result<TargetModel> {
    let head = pre.head.select_outputs(&pre.head_rows(class_ids)?)?;
    let mut clf = Classifier::new(pre.trunk.clone(), head, cfg.learning_rate, cfg.momentum, cfg.weight_decay)?;
    for opt in [&mut clf.trunk_opt, &mut clf.head_opt] {
        opt.schedule = LrSchedule::constant();
    }
    let (xs, labels) = labelled_pool(dataset, class_ids)?;
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let key_seed = class_ids.iter().fold(cfg.seed, |s, &id| derive_seed(s, id as u64));
    let mut r = rng(key_seed);
    for _ in 0..cfg.epochs {
        clf.epoch(&xs, &labels, cfg.batch_size.max(1), &mut order, &mut r)?;
    }
    Ok(TargetModel {
        kind: TargetKind::FineTunedNet {
            trunk: clf.trunk,
            head: clf.head,
            class_ids: class_ids.to_vec(),
        },
        provenance: format!(
            "fine-tuned {} epochs at lr {} (batch {})",
            cfg.epochs, cfg.learning_rate, cfg.batch_size
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::eval_target_quality;
    use crate::tasks::{gen_gaussian_dataset, GaussianConfig};
    use crate::util::hash_json;

    fn quick() -> PretrainConfig {
        PretrainConfig {
            trunk_dims: vec![2, 16, 8],
            epochs: 4,
            ..PretrainConfig::default()
        }
    }

    #[test]
    fn pretraining_is_deterministic_and_reduces_loss() {
        let ds = gen_gaussian_dataset(5, &GaussianConfig::default()).unwrap();
        let a = pretrain(&ds, &quick()).unwrap();
        let b = pretrain(&ds, &quick()).unwrap();
        assert_eq!(hash_json(&a).unwrap(), hash_json(&b).unwrap());
        assert_eq!(a.head.output_dim(), 64);
        assert!(a.log.epoch_loss.last().unwrap() < &a.log.epoch_loss[0]);
    }

    #[test]
    fn zero_epoch_finetune_equals_slice_and_leaves_source_untouched() {
        let ds = gen_gaussian_dataset(5, &GaussianConfig::default()).unwrap();
        let pre = pretrain(&ds, &quick()).unwrap();
        let before = pre.clone();
        let ids = [7, 3, 40, 12, 0];
        let cfg0 = FinetuneConfig {
            epochs: 0,
            ..FinetuneConfig::default()
        };
        let t0 = finetune_target(&pre, &ds, &ids, &cfg0).unwrap();
        let s = sliced_target(&pre, &ids).unwrap();
        let probe = Matrix::from_rows(&[[0.5, -3.0], [7.0, 2.0]]).unwrap();
        assert_eq!(t0.predict_proba(&probe).unwrap(), s.predict_proba(&probe).unwrap());
        let t3 = finetune_target(&pre, &ds, &ids, &FinetuneConfig::default()).unwrap();
        let t3b = finetune_target(&pre, &ds, &ids, &FinetuneConfig::default()).unwrap();
        assert_eq!(t3, t3b);
        assert_ne!(t3.predict_proba(&probe).unwrap(), s.predict_proba(&probe).unwrap());
        assert_eq!(pre, before);
        let acc = eval_target_quality(&t3, &ds, &ids).unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn unseen_class_is_a_config_error() {
        let ds = gen_gaussian_dataset(5, &GaussianConfig::default()).unwrap();
        let pre = pretrain(&ds, &quick()).unwrap();
        assert!(matches!(sliced_target(&pre, &[0, 90]), Err(Error::Config(_))));
    }
}
