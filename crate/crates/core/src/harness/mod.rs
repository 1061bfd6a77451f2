//! Experiment orchestration shared by the command-line tool and the test
//! suites: data generation, pretraining, target construction, training runs,
//! sweeps and exports.

mod boundary;
mod config;
mod output;
mod stages;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use boundary::{bayes_classifier, boundary_grid, BoundaryCell, BoundaryGrid, BOUNDARY_EXTENT};
pub use config::{GaussianSettings, RunConfig, SinusoidSettings, Study};
pub use stages::*;
pub use output::{read_ndjson, summary_csv, write_metrics, write_summary, SummaryRow, SUMMARY_HEADER};

use crate::error::{Error, Result};
use crate::hardness::{class_centers, select_count, similarity_matrix, sinusoid_hardness, task_hardness, HardnessRanking, SimilarityMatrix, SinusoidMetric};
use crate::numerics::{Activation, Matrix, MlpModel};
use crate::protocols::{
    meta_eval, meta_train, Algorithm, AnalyticTeacher, CachedTeacher, EvalSummary, TaskRef, TrainOutcome,
};
use crate::targets::{bayes_predict, finetune_target, PretrainedModel, TargetCache};
use crate::tasks::{sample_biased_episode, sample_episode, Episode, GaussianDataset, SinusoidBank, Split};
use crate::util::{derive_seed, hash_json, rng};

/// Stream ids for [`derive_seed`], one per independent random source.
mod streams {
    pub const INIT: u64 = 10;
    pub const SELECTION: u64 = 20;
    pub const TRAIN_TASKS: u64 = 31;
    pub const VAL_TASKS: u64 = 32;
    pub const TEST_TASKS: u64 = 33;
    pub const BIASED_TASKS: u64 = 34;
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub config: RunConfig,
    pub outcome: TrainOutcome,
    pub test: EvalSummary,
    pub ranking: HardnessRanking,
    pub inputs: BTreeMap<String, String>,
}

impl RunResult {
    pub fn targets(&self) -> usize {
        self.ranking.entries.iter().filter(|e| e.selected).count()
    }

    pub fn summary_row(&self) -> Result<SummaryRow> {
        SummaryRow::new(&self.config, &self.test, self.targets(), self.outcome.best_episode)
    }
}

pub fn sinusoid_bank(cfg: &RunConfig) -> Result<SinusoidBank> {
    let s = &cfg.sinusoid;
    SinusoidBank::generate(cfg.seed, &s.tasks, s.train_tasks, s.val_tasks, s.test_tasks)
}

/// Freshly initialised meta-model for a study and algorithm.
pub fn initial_model(cfg: &RunConfig) -> Result<MlpModel> {
    let seed = derive_seed(cfg.seed, streams::INIT);
    match (cfg.study, cfg.algorithm) {
        (Study::Sinusoid, Algorithm::Maml) => {
            let mut dims = cfg.sinusoid.embedding_dims.clone();
            dims.push(1);
            MlpModel::init_fan_in(&dims, Activation::Relu, seed)
        }
        (Study::Sinusoid, Algorithm::Protoreg) => MlpModel::init_fan_in(&cfg.sinusoid.embedding_dims, Activation::Relu, seed),
        (Study::Gaussian, Algorithm::Protonet) => MlpModel::init_fan_in(&cfg.gaussian.pretrain.trunk_dims, Activation::Relu, seed),
        (s, a) => Err(Error::Config(format!("algorithm {a} is not available for the {s} study"))),
    }
}

/// Which meta-training tasks get a target, by the configured metric and mode.
pub fn select_targets(cfg: &RunConfig, scores: &[f64]) -> Result<HardnessRanking> {
    let p = &cfg.protocol;
    select_count(
        scores,
        p.targets_for(scores.len()),
        p.target_ratio,
        p.selection,
        &p.hardness_metric,
        derive_seed(cfg.seed, streams::SELECTION),
    )
}

pub fn sinusoid_scores(cfg: &RunConfig, bank: &SinusoidBank) -> Result<Vec<f64>> {
    let metric: SinusoidMetric = cfg.protocol.hardness_metric.parse()?;
    Ok(bank.train.iter().map(|t| sinusoid_hardness(t, metric)).collect())
}

fn episode_schedule(budget: usize, tasks: usize) -> Result<Vec<usize>> {
    if tasks == 0 {
        return Err(Error::Config("no meta-training tasks".into()));
    }
    Ok((0..budget).map(|i| i % tasks).collect())
}

/// Meta-trains on the bank's training tasks (one episode per task, cycling if
/// the budget exceeds the bank) and evaluates the best checkpoint on the test
/// tasks.
pub fn run_sinusoid(cfg: &RunConfig, bank: &SinusoidBank) -> Result<RunResult> {
    cfg.validate()?;
    if cfg.study != Study::Sinusoid {
        return Err(Error::Config("run_sinusoid needs the sinusoid study".into()));
    }
    let ranking = select_targets(cfg, &sinusoid_scores(cfg, bank)?)?;
    let mask = ranking.selected_mask();
    let order = episode_schedule(cfg.protocol.episodes, bank.train.len())?;
    let train: Vec<TaskRef> = order.iter().map(|&i| TaskRef::Sine(&bank.train[i])).collect();
    let flags: Vec<bool> = order.iter().map(|&i| mask[i]).collect();
    let val: Vec<TaskRef> = bank.val.iter().map(TaskRef::Sine).collect();
    let init = initial_model(cfg)?;
    let outcome = meta_train(cfg.algorithm, &init, &cfg.protocol, &train, &flags, &mut AnalyticTeacher, &val)?;
    let test: Vec<TaskRef> = bank.test.iter().map(TaskRef::Sine).collect();
    let summary = meta_eval(cfg.algorithm, &outcome.best, &test, &cfg.protocol)?;
    let mut inputs = BTreeMap::new();
    inputs.insert("sinusoid_bank".to_string(), hash_json(bank)?);
    Ok(RunResult {
        config: cfg.clone(),
        outcome,
        test: summary,
        ranking,
        inputs,
    })
}

/// Meta-train, validation and meta-test episodes of the Gaussian study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianTaskSets {
    pub train: Vec<Episode>,
    pub val: Vec<Episode>,
    pub test: Vec<Episode>,
}

fn sample_many(ds: &GaussianDataset, split: Split, s: &GaussianSettings, count: usize, seed: u64) -> Result<Vec<Episode>> {
    let mut r = rng(seed);
    (0..count)
        .map(|_| sample_episode(ds, split, s.n_way, s.shot, s.queries_per_class, &mut r))
        .collect()
}

pub fn gaussian_task_sets(cfg: &RunConfig, ds: &GaussianDataset) -> Result<GaussianTaskSets> {
    let s = &cfg.gaussian;
    Ok(GaussianTaskSets {
        train: sample_many(ds, Split::MetaTrain, s, s.train_tasks, derive_seed(cfg.seed, streams::TRAIN_TASKS))?,
        val: sample_many(ds, Split::MetaVal, s, s.val_tasks, derive_seed(cfg.seed, streams::VAL_TASKS))?,
        test: sample_many(ds, Split::MetaTest, s, s.test_tasks, derive_seed(cfg.seed, streams::TEST_TASKS))?,
    })
}

/// Meta-test episodes whose points all have relative likelihood below `threshold`.
pub fn biased_test_set(cfg: &RunConfig, ds: &GaussianDataset, threshold: f64, count: usize) -> Result<Vec<Episode>> {
    let s = &cfg.gaussian;
    let mut r = rng(derive_seed(derive_seed(cfg.seed, streams::BIASED_TASKS), threshold.to_bits()));
    (0..count)
        .map(|_| {
            sample_biased_episode(
                ds,
                Split::MetaTest,
                s.n_way,
                s.shot,
                s.queries_per_class,
                threshold,
                s.max_retries,
                &mut r,
            )
        })
        .collect()
}

/// Similarity matrix over meta-train classes and the hardness of every task.
pub fn gaussian_scores(pre: &PretrainedModel, ds: &GaussianDataset, tasks: &[Episode]) -> Result<(SimilarityMatrix, Vec<f64>)> {
    let ids = ds.class_ids(Split::MetaTrain);
    let centers = class_centers(&pre.trunk, ds, &ids)?;
    let f = similarity_matrix(&centers, &ids, "pretrained trunk")?;
    let scores = tasks.iter().map(|e| task_hardness(&f, &e.class_ids)).collect::<Result<_>>()?;
    Ok((f, scores))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetBuildReport {
    pub selected_tasks: usize,
    pub distinct_class_sets: usize,
    pub built: usize,
    pub reused: usize,
}

/// Fine-tunes a target for every selected task whose class set is not cached yet.
pub fn build_targets(
    cfg: &RunConfig,
    pre: &PretrainedModel,
    ds: &GaussianDataset,
    tasks: &[Episode],
    ranking: &HardnessRanking,
    cache: &mut TargetCache,
) -> Result<TargetBuildReport> {
    let (b0, h0) = (cache.builds(), cache.hits());
    let selected = ranking.selected_tasks();
    let mut keys = std::collections::BTreeSet::new();
    for &t in &selected {
        let ids = &tasks[t].class_ids;
        keys.insert(crate::targets::cache_key(ids));
        cache.get_or_build(ids, |sorted| finetune_target(pre, ds, sorted, &cfg.gaussian.finetune))?;
    }
    cache.flush()?;
    Ok(TargetBuildReport {
        selected_tasks: selected.len(),
        distinct_class_sets: keys.len(),
        built: cache.builds() - b0,
        reused: cache.hits() - h0,
    })
}

/// ProtoNet meta-training initialised from the pretrained trunk, with cached
/// targets for the selected tasks, evaluated on the given test episodes.
pub fn run_gaussian(
    cfg: &RunConfig,
    ds: &GaussianDataset,
    pre: &PretrainedModel,
    sets: &GaussianTaskSets,
    scores: &[f64],
    cache: &mut TargetCache,
) -> Result<RunResult> {
    cfg.validate()?;
    if cfg.study != Study::Gaussian {
        return Err(Error::Config("run_gaussian needs the Gaussian study".into()));
    }
    let ranking = select_targets(cfg, scores)?;
    let mask = ranking.selected_mask();
    let order = episode_schedule(cfg.protocol.episodes, sets.train.len())?;
    let train: Vec<TaskRef> = order.iter().map(|&i| TaskRef::Gauss(&sets.train[i])).collect();
    let flags: Vec<bool> = order.iter().map(|&i| mask[i]).collect();
    let val: Vec<TaskRef> = sets.val.iter().map(TaskRef::Gauss).collect();
    let outcome = meta_train(
        cfg.algorithm,
        &pre.trunk,
        &cfg.protocol,
        &train,
        &flags,
        &mut CachedTeacher { cache },
        &val,
    )?;
    let test: Vec<TaskRef> = sets.test.iter().map(TaskRef::Gauss).collect();
    let summary = meta_eval(cfg.algorithm, &outcome.best, &test, &cfg.protocol)?;
    let mut inputs = BTreeMap::new();
    inputs.insert("gaussian_dataset".to_string(), hash_json(ds)?);
    inputs.insert("pretrained".to_string(), hash_json(pre)?);
    Ok(RunResult {
        config: cfg.clone(),
        outcome,
        test: summary,
        ranking,
        inputs,
    })
}

/// ProtoNet accuracy of a fixed embedding (no meta-training).
pub fn eval_embedding(cfg: &RunConfig, phi: &MlpModel, episodes: &[Episode]) -> Result<EvalSummary> {
    let refs: Vec<TaskRef> = episodes.iter().map(TaskRef::Gauss).collect();
    meta_eval(Algorithm::Protonet, phi, &refs, &cfg.protocol)
}

/// Mean query accuracy of the Bayes classifier over the episode classes.
pub fn bayes_accuracy(ds: &GaussianDataset, episodes: &[Episode]) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::Config("no evaluation episodes".into()));
    }
    let mut total = 0.0;
    for e in episodes {
        let classes: Vec<_> = e.class_ids.iter().map(|&id| ds.class(id).cloned()).collect::<Result<_>>()?;
        let hits = e.query.iter().filter(|p| bayes_predict(&classes, p.x).argmax == p.label).count();
        total += hits as f64 / e.query.len() as f64;
    }
    Ok(total / episodes.len() as f64)
}

/// Probabilities of a ProtoNet solver built from an episode's support set.
pub fn protonet_classifier<'a>(phi: &'a MlpModel, episode: &'a Episode) -> Result<impl Fn(&Matrix) -> Result<Matrix> + 'a> {
    let solver = crate::solvers::protonet_solver(phi, &episode.support_inputs(), &episode.support_labels(), episode.n_way())?;
    Ok(move |x: &Matrix| solver.predict_proba(x))
}
