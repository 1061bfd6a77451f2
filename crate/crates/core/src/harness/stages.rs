//! File-backed pipeline stages: each reads its prerequisites from the data
//! directory, refuses to overwrite outputs unless forced, and embeds the run
//! configuration and input hashes in what it writes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::boundary::{bayes_classifier, boundary_grid, BoundaryGrid};
use super::config::{RunConfig, Study};
use super::output::{write_metrics, write_summary, SummaryRow};
use super::{
    biased_test_set, build_targets, gaussian_scores, gaussian_task_sets, initial_model, run_gaussian, run_sinusoid,
    select_targets, sinusoid_bank, sinusoid_scores, GaussianTaskSets, RunResult, TargetBuildReport,
};
use crate::error::{Error, Result};
use crate::hardness::HardnessRanking;
use crate::numerics::{load_checkpoint, save_checkpoint, MlpModel};
use crate::protocols::{meta_eval, Algorithm, EvalSummary, Protocol, TaskRef};
use crate::targets::{finetune_target, pretrain, PretrainedModel, TargetCache};
use crate::tasks::{gen_gaussian_dataset, sample_episode, GaussianDataset, SinusoidBank, Split};
use crate::util::{derive_seed, file_hash, hash_json, read_json, rng, write_atomic, write_json};

/// Where every artifact of a configuration lives.
#[derive(Clone, Debug)]
pub struct Layout {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig) -> Self {
        Layout {
            data_dir: cfg.data_dir.clone(),
            out_dir: cfg.out_dir.clone(),
        }
    }

    pub fn sinusoid_bank(&self) -> PathBuf {
        self.data_dir.join("sinusoid_bank.json")
    }

    pub fn gaussian_dataset(&self) -> PathBuf {
        self.data_dir.join("gaussian_dataset.json")
    }

    pub fn pretrained(&self) -> PathBuf {
        self.data_dir.join("pretrained.json")
    }

    pub fn targets_dir(&self) -> PathBuf {
        self.data_dir.join("targets")
    }

    pub fn ranking_csv(&self) -> PathBuf {
        self.targets_dir().join("ranking.csv")
    }

    pub fn run_dir(&self, cfg: &RunConfig) -> Result<PathBuf> {
        Ok(self.out_dir.join(run_name(cfg)?))
    }
}

/// `study-algorithm-protocol-<config hash prefix>`.
pub fn run_name(cfg: &RunConfig) -> Result<String> {
    let hash = hash_json(cfg)?;
    Ok(format!("{}-{}-{}-{}", cfg.study, cfg.algorithm, cfg.protocol.protocol, &hash[..12]))
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Config(format!(
            "{} already exists; pass --force to overwrite it",
            path.display()
        )));
    }
    Ok(())
}

fn require(path: &Path, what: &str, command: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingPrerequisite {
            what: format!("{what} ({})", path.display()),
            command: command.into(),
        })
    }
}

/// Writes the study's dataset and returns `(path, sha256)` of each file.
pub fn gen_data(cfg: &RunConfig, force: bool) -> Result<Vec<(PathBuf, String)>> {
    let layout = Layout::new(cfg);
    match cfg.study {
        Study::Sinusoid => {
            let path = layout.sinusoid_bank();
            refuse_overwrite(&path, force)?;
            let hash = write_json(&path, &sinusoid_bank(cfg)?)?;
            Ok(vec![(path, hash)])
        }
        Study::Gaussian => {
            let path = layout.gaussian_dataset();
            refuse_overwrite(&path, force)?;
            let hash = write_json(&path, &gen_gaussian_dataset(cfg.seed, &cfg.gaussian.data)?)?;
            Ok(vec![(path, hash)])
        }
    }
}

pub fn load_bank(layout: &Layout) -> Result<SinusoidBank> {
    let path = layout.sinusoid_bank();
    require(&path, "sinusoid task bank", "gen-data --study sinusoid")?;
    read_json(&path)
}

pub fn load_dataset(layout: &Layout) -> Result<GaussianDataset> {
    let path = layout.gaussian_dataset();
    require(&path, "Gaussian dataset", "gen-data --study gaussian")?;
    read_json(&path)
}

pub fn load_pretrained(layout: &Layout) -> Result<PretrainedModel> {
    let path = layout.pretrained();
    require(&path, "pretrained network", "pretrain")?;
    read_json(&path)
}

/// Pretrains the classification network on the meta-train classes.
pub fn pretrain_stage(cfg: &RunConfig, force: bool) -> Result<(PathBuf, String, PretrainedModel)> {
    let layout = Layout::new(cfg);
    let ds = load_dataset(&layout)?;
    let path = layout.pretrained();
    refuse_overwrite(&path, force)?;
    let pre = pretrain(&ds, &cfg.gaussian.pretrain)?;
    let hash = write_json(&path, &pre)?;
    Ok((path, hash, pre))
}

/// Identifies everything a cached target depends on: the dataset, the
/// pretrained network and the fine-tuning settings.
pub fn target_config_hash(cfg: &RunConfig) -> Result<String> {
    let layout = Layout::new(cfg);
    let inputs = (
        file_hash(&layout.gaussian_dataset())?,
        file_hash(&layout.pretrained())?,
        &cfg.gaussian.finetune,
    );
    hash_json(&inputs)
}

/// Opens the on-disk target cache. With `force` a cache built for other
/// inputs is discarded; otherwise it is an error.
pub fn open_target_cache(cfg: &RunConfig, force: bool) -> Result<TargetCache> {
    let layout = Layout::new(cfg);
    require(&layout.gaussian_dataset(), "Gaussian dataset", "gen-data --study gaussian")?;
    require(&layout.pretrained(), "pretrained network", "pretrain")?;
    let hash = target_config_hash(cfg)?;
    match TargetCache::open(&layout.targets_dir(), &hash) {
        Err(Error::CacheInvalidated { .. }) if force => TargetCache::reset(&layout.targets_dir(), &hash),
        other => other,
    }
}

/// Everything the Gaussian stages share, loaded once.
pub struct GaussianInputs {
    pub dataset: GaussianDataset,
    pub pretrained: PretrainedModel,
    pub sets: GaussianTaskSets,
    pub scores: Vec<f64>,
}

pub fn gaussian_inputs(cfg: &RunConfig) -> Result<GaussianInputs> {
    let layout = Layout::new(cfg);
    let dataset = load_dataset(&layout)?;
    let pretrained = load_pretrained(&layout)?;
    let sets = gaussian_task_sets(cfg, &dataset)?;
    let (_, scores) = gaussian_scores(&pretrained, &dataset, &sets.train)?;
    Ok(GaussianInputs {
        dataset,
        pretrained,
        sets,
        scores,
    })
}

/// Ranks the meta-train tasks, fine-tunes targets for the selected ones and
/// writes the ranking next to the cache.
pub fn build_targets_stage(cfg: &RunConfig, force: bool) -> Result<(TargetBuildReport, HardnessRanking)> {
    cfg.validate()?;
    if cfg.study != Study::Gaussian {
        return Err(Error::Unsupported("targets are built only for the Gaussian study".into()));
    }
    let mut cache = open_target_cache(cfg, force)?;
    let inputs = gaussian_inputs(cfg)?;
    let mut st = cfg.clone();
    st.protocol.protocol = Protocol::St;
    let ranking = select_targets(&st, &inputs.scores)?;
    let report = build_targets(&st, &inputs.pretrained, &inputs.dataset, &inputs.sets.train, &ranking, &mut cache)?;
    write_atomic(&Layout::new(cfg).ranking_csv(), ranking.to_csv().as_bytes())?;
    Ok((report, ranking))
}

/// Provenance record written next to every trained checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub inputs: BTreeMap<String, String>,
    pub checkpoint_sha256: String,
    pub targets: usize,
    pub best_episode: u64,
    pub test: EvalSummary,
    pub summary: SummaryRow,
}

pub const RUN_RECORD: &str = "run.json";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const METRICS: &str = "metrics.ndjson";
pub const SUMMARY: &str = "summary.csv";

/// Trains one configuration from prepared inputs, without touching disk.
pub fn train_in_memory(cfg: &RunConfig, cache: Option<&mut TargetCache>) -> Result<RunResult> {
    let layout = Layout::new(cfg);
    match cfg.study {
        Study::Sinusoid => run_sinusoid(cfg, &load_bank(&layout)?),
        Study::Gaussian => {
            let mut inputs = gaussian_inputs(cfg)?;
            if cfg.gaussian.eval_threshold < 1.0 {
                inputs.sets.test = biased_test_set(cfg, &inputs.dataset, cfg.gaussian.eval_threshold, cfg.gaussian.test_tasks)?;
            }
            let mut opened;
            let cache = match cache {
                Some(c) => c,
                None => {
                    opened = if cfg.protocol.targets_for(inputs.sets.train.len()) == 0 {
                        TargetCache::in_memory("unused")
                    } else {
                        open_target_cache(cfg, false)?
                    };
                    &mut opened
                }
            };
            run_gaussian(cfg, &inputs.dataset, &inputs.pretrained, &inputs.sets, &inputs.scores, cache).map_err(|e| match e {
                Error::CacheMiss(key) => Error::MissingPrerequisite {
                    what: format!("target for class set {key}"),
                    command: "build-targets".into(),
                },
                e => e,
            })
        }
    }
}

/// Persists a finished run: checkpoint, metrics stream, summary and record.
pub fn save_run(cfg: &RunConfig, result: &RunResult, force: bool) -> Result<(PathBuf, RunRecord)> {
    let dir = Layout::new(cfg).run_dir(cfg)?;
    refuse_overwrite(&dir.join(RUN_RECORD), force)?;
    let checkpoint_sha256 = save_checkpoint(&dir.join(CHECKPOINT), &result.outcome.best)?;
    write_metrics(&dir.join(METRICS), cfg, &result.inputs, &result.outcome.records)?;
    let summary = result.summary_row()?;
    write_summary(&dir.join(SUMMARY), std::slice::from_ref(&summary))?;
    let record = RunRecord {
        config: cfg.clone(),
        inputs: result.inputs.clone(),
        checkpoint_sha256,
        targets: result.targets(),
        best_episode: result.outcome.best_episode,
        test: result.test.clone(),
        summary,
    };
    write_json(&dir.join(RUN_RECORD), &record)?;
    Ok((dir, record))
}

pub fn train_stage(cfg: &RunConfig, force: bool) -> Result<(PathBuf, RunRecord)> {
    cfg.validate()?;
    let result = train_in_memory(cfg, None)?;
    save_run(cfg, &result, force)
}

/// Test-set evaluation of a saved model under `cfg`.
pub fn evaluate(cfg: &RunConfig, model: &MlpModel) -> Result<EvalSummary> {
    let layout = Layout::new(cfg);
    match cfg.study {
        Study::Sinusoid => {
            let bank = load_bank(&layout)?;
            let tasks: Vec<TaskRef> = bank.test.iter().map(TaskRef::Sine).collect();
            meta_eval(cfg.algorithm, model, &tasks, &cfg.protocol)
        }
        Study::Gaussian => {
            let ds = load_dataset(&layout)?;
            let s = &cfg.gaussian;
            let test = if s.eval_threshold < 1.0 {
                biased_test_set(cfg, &ds, s.eval_threshold, s.test_tasks)?
            } else {
                gaussian_task_sets(cfg, &ds)?.test
            };
            let tasks: Vec<TaskRef> = test.iter().map(TaskRef::Gauss).collect();
            meta_eval(cfg.algorithm, model, &tasks, &cfg.protocol)
        }
    }
}

/// Re-evaluates a saved run, optionally on a biased test set.
pub fn eval_stage(run_dir: &Path, threshold: Option<f64>) -> Result<SummaryRow> {
    let record_path = run_dir.join(RUN_RECORD);
    require(&record_path, "run record", "train")?;
    let record: RunRecord = read_json(&record_path)?;
    let model = load_checkpoint(&run_dir.join(CHECKPOINT))?;
    let mut cfg = record.config;
    if let Some(t) = threshold {
        if cfg.study != Study::Gaussian {
            return Err(Error::Unsupported("likelihood thresholds apply only to the Gaussian study".into()));
        }
        cfg.gaussian.eval_threshold = t;
    }
    let test = evaluate(&cfg, &model)?;
    SummaryRow::new(&cfg, &test, record.targets, record.best_episode)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    TargetCount,
    Lambda,
    Threshold,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::TargetCount => "target_count",
            SweepAxis::Lambda => "lambda",
            SweepAxis::Threshold => "threshold",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target_count" | "target-count" => Ok(SweepAxis::TargetCount),
            "lambda" => Ok(SweepAxis::Lambda),
            "threshold" => Ok(SweepAxis::Threshold),
            other => Err(Error::Config(format!("unknown sweep axis `{other}`"))),
        }
    }
}

/// Configuration of one point on a training axis.
pub fn sweep_point(cfg: &RunConfig, axis: SweepAxis, value: f64) -> Result<RunConfig> {
    let mut c = cfg.clone();
    match axis {
        SweepAxis::TargetCount => {
            if !(value >= 0.0) || value.fract() != 0.0 {
                return Err(Error::Config(format!("target count must be a non-negative integer, got {value}")));
            }
            c.protocol.target_count = Some(value as usize);
            c.protocol.protocol = if value == 0.0 { Protocol::Sq } else { Protocol::St };
        }
        SweepAxis::Lambda => {
            c.protocol.lambda = value;
            c.protocol.protocol = Protocol::St;
        }
        SweepAxis::Threshold => {
            if !(value > 0.0 && value <= 1.0) {
                return Err(Error::Config(format!("likelihood threshold must be in (0, 1], got {value}")));
            }
            c.gaussian.eval_threshold = value;
        }
    }
    c.validate()?;
    Ok(c)
}

/// One summary row per axis value, all from the same seed. Training axes
/// train a model per value (building missing Gaussian targets on the way);
/// the threshold axis trains once and evaluates on each biased test set.
pub fn sweep(cfg: &RunConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<SummaryRow>> {
    cfg.validate()?;
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let points = values.iter().map(|&v| sweep_point(cfg, axis, v)).collect::<Result<Vec<_>>>()?;
    if axis == SweepAxis::Threshold {
        if cfg.study != Study::Gaussian {
            return Err(Error::Unsupported("the threshold axis applies only to the Gaussian study".into()));
        }
        let mut base = cfg.clone();
        base.gaussian.eval_threshold = 1.0;
        let mut cache = gaussian_cache_for(&base)?;
        let trained = train_in_memory(&base, Some(&mut cache))?;
        return points
            .iter()
            .map(|p| {
                let test = evaluate(p, &trained.outcome.best)?;
                SummaryRow::new(p, &test, trained.targets(), trained.outcome.best_episode)
            })
            .collect();
    }
    let mut cache = match cfg.study {
        Study::Gaussian => Some(gaussian_cache_for(cfg)?),
        Study::Sinusoid => None,
    };
    let mut rows = Vec::with_capacity(points.len());
    for p in &points {
        log::info!("sweep {axis}: training {}", run_name(p)?);
        let result = match cache.as_mut() {
            Some(c) => {
                build_targets_for(p, c)?;
                train_in_memory(p, Some(c))?
            }
            None => train_in_memory(p, None)?,
        };
        rows.push(result.summary_row()?);
    }
    Ok(rows)
}

fn gaussian_cache_for(cfg: &RunConfig) -> Result<TargetCache> {
    if cfg.protocol.protocol == Protocol::Sq && cfg.protocol.target_count.unwrap_or(0) == 0 {
        return Ok(TargetCache::in_memory("unused"));
    }
    open_target_cache(cfg, false)
}

fn build_targets_for(cfg: &RunConfig, cache: &mut TargetCache) -> Result<()> {
    if cfg.protocol.protocol == Protocol::Sq {
        return Ok(());
    }
    let inputs = gaussian_inputs(cfg)?;
    let ranking = select_targets(cfg, &inputs.scores)?;
    build_targets(cfg, &inputs.pretrained, &inputs.dataset, &inputs.sets.train, &ranking, cache)?;
    Ok(())
}

pub fn sweep_path(cfg: &RunConfig, axis: SweepAxis) -> Result<PathBuf> {
    let hash = hash_json(cfg)?;
    Ok(cfg.out_dir.join(format!("sweep-{}-{}-{axis}-{}.csv", cfg.study, cfg.algorithm, &hash[..12])))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundarySource {
    /// Bayes posterior of the episode classes.
    Bayes,
    /// ProtoNet on a saved embedding, or on the pretrained trunk.
    Model,
    /// A fine-tuned target for the episode classes (meta-train split only).
    Target,
}

impl FromStr for BoundarySource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bayes" => Ok(BoundarySource::Bayes),
            "model" => Ok(BoundarySource::Model),
            "target" => Ok(BoundarySource::Target),
            other => Err(Error::Config(format!("unknown boundary source `{other}`"))),
        }
    }
}

/// Grid export for one seeded episode drawn from `split`.
pub fn export_boundary(
    cfg: &RunConfig,
    source: BoundarySource,
    split: Split,
    episode_index: u64,
    resolution: usize,
    checkpoint: Option<&Path>,
) -> Result<BoundaryGrid> {
    if cfg.study != Study::Gaussian {
        return Err(Error::Unsupported("decision boundaries exist only for the Gaussian study".into()));
    }
    let layout = Layout::new(cfg);
    let ds = load_dataset(&layout)?;
    let s = &cfg.gaussian;
    let mut r = rng(derive_seed(derive_seed(cfg.seed, 40), episode_index));
    let episode = sample_episode(&ds, split, s.n_way, s.shot, s.queries_per_class, &mut r)?;
    match source {
        BoundarySource::Bayes => boundary_grid(resolution, &episode, "bayes", bayes_classifier(&ds, &episode)?),
        BoundarySource::Model => {
            let (phi, name) = match checkpoint {
                Some(p) => (load_checkpoint(p)?, format!("protonet:{}", p.display())),
                None => (load_pretrained(&layout)?.trunk, "protonet:pretrained".to_string()),
            };
            let solver = crate::solvers::protonet_solver(&phi, &episode.support_inputs(), &episode.support_labels(), episode.n_way())?;
            boundary_grid(resolution, &episode, &name, |x| solver.predict_proba(x))
        }
        BoundarySource::Target => {
            if split != Split::MetaTrain {
                return Err(Error::Unsupported("fine-tuned targets exist only for meta-train classes".into()));
            }
            let pre = load_pretrained(&layout)?;
            let target = finetune_target(&pre, &ds, &episode.class_ids, &s.finetune)?;
            let ids = target.class_ids().map(<[usize]>::to_vec).unwrap_or_default();
            let cols: Vec<usize> = episode
                .class_ids
                .iter()
                .map(|id| ids.iter().position(|c| c == id).ok_or_else(|| Error::Config(format!("target lacks class {id}"))))
                .collect::<Result<_>>()?;
            boundary_grid(resolution, &episode, "fine-tuned target", |x| {
                let p = target.predict_proba(x)?;
                Ok(crate::numerics::Matrix::from_fn(p.rows(), cols.len(), |i, j| p.get(i, cols[j])))
            })
        }
    }
}

/// Accuracy of a ProtoNet on the pretrained trunk over the test episodes,
/// the "pretrain" row of the Gaussian comparison.
pub fn pretrain_baseline(cfg: &RunConfig) -> Result<EvalSummary> {
    let mut c = cfg.clone();
    c.algorithm = Algorithm::Protonet;
    let pre = load_pretrained(&Layout::new(cfg))?;
    evaluate(&c, &pre.trunk)
}

/// Model initialisation used by `train`, exposed for inspection.
pub fn initial_checkpoint(cfg: &RunConfig, path: &Path) -> Result<String> {
    save_checkpoint(path, &initial_model(cfg)?)
}

pub fn sinusoid_ranking(cfg: &RunConfig) -> Result<HardnessRanking> {
    let bank = load_bank(&Layout::new(cfg))?;
    select_targets(cfg, &sinusoid_scores(cfg, &bank)?)
}
