use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::objective::{episode_gradient, TaskRef, TeacherSource};
use super::{Algorithm, ProtocolConfig};
use crate::error::{Error, Result};
use crate::numerics::{sgd_step, MlpModel, OptimizerState};
use crate::solvers::{maml_adapt, protonet_solver, protoreg_solver};
use crate::targets::first_argmax;
use crate::util::mean_ci95;

pub const METRICS_SCHEMA: u32 = 1;

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub schema: u32,
    pub episode: u64,
    pub split: String,
    pub loss: Option<f64>,
    pub mse_noisy: Option<f64>,
    pub mse_clean: Option<f64>,
    pub accuracy: Option<f64>,
    pub lr_eff: f64,
    pub wall_clock_s: f64,
}

/// Mean with the half-width of its 95% confidence interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub ci95: f64,
}

impl Stat {
    fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let (mean, ci95) = mean_ci95(values);
        Some(Stat { mean, ci95 })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub mse_noisy: Option<f64>,
    pub mse_clean: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mse_noisy: Option<Stat>,
    pub mse_clean: Option<Stat>,
    pub accuracy: Option<Stat>,
}

impl EvalSummary {
    /// Higher is better: accuracy, or negated noisy MSE.
    pub fn score(&self) -> f64 {
        match (self.accuracy, self.mse_noisy) {
            (Some(a), _) => a.mean,
            (None, Some(m)) => -m.mean,
            _ => f64::NEG_INFINITY,
        }
    }
}

/// Builds the solver from the task's support set and scores it on the query set.
pub fn eval_task(algorithm: Algorithm, model: &MlpModel, task: TaskRef<'_>, cfg: &ProtocolConfig) -> Result<TaskMetrics> {
    match (algorithm, task) {
        (Algorithm::Maml | Algorithm::Protoreg, TaskRef::Sine(t)) => {
            let (sx, sy) = (t.support_inputs(), t.support_labels());
            let solver = if algorithm == Algorithm::Maml {
                maml_adapt(model, &sx, &sy, cfg.inner_lr, cfg.inner_steps)?
            } else {
                protoreg_solver(model, &sx, &sy)?
            };
            if t.query.is_empty() {
                return Err(Error::Config("evaluation task has no query instances".into()));
            }
            let pred = solver.predict_values(&t.query_inputs())?;
            let n = pred.len() as f64;
            let noisy = pred.iter().zip(&t.query).map(|(p, q)| (p - q.y).powi(2)).sum::<f64>() / n;
            let clean = pred.iter().zip(&t.query).map(|(p, q)| (p - t.curve(q.x)).powi(2)).sum::<f64>() / n;
            Ok(TaskMetrics {
                mse_noisy: Some(noisy),
                mse_clean: Some(clean),
                accuracy: None,
            })
        }
        (Algorithm::Protonet, TaskRef::Gauss(e)) => {
            let solver = protonet_solver(model, &e.support_inputs(), &e.support_labels(), e.n_way())?;
            if e.query.is_empty() {
                return Err(Error::Config("evaluation task has no query instances".into()));
            }
            let probs = solver.predict_proba(&e.query_inputs())?;
            let hits = probs
                .iter_rows()
                .zip(e.query_labels())
                .filter(|(row, l)| first_argmax(row) == *l)
                .count();
            Ok(TaskMetrics {
                accuracy: Some(hits as f64 / e.query.len() as f64),
                ..TaskMetrics::default()
            })
        }
        (a, _) => Err(Error::Config(format!("algorithm {a} does not apply to this task type"))),
    }
}

/// Mean ± 95% CI of the per-task metrics.
pub fn meta_eval(algorithm: Algorithm, model: &MlpModel, tasks: &[TaskRef<'_>], cfg: &ProtocolConfig) -> Result<EvalSummary> {
    if tasks.is_empty() {
        return Err(Error::Config("no evaluation episodes".into()));
    }
    let per: Vec<TaskMetrics> = tasks
        .iter()
        .map(|&t| eval_task(algorithm, model, t, cfg))
        .collect::<Result<_>>()?;
    let collect = |f: fn(&TaskMetrics) -> Option<f64>| per.iter().filter_map(f).collect::<Vec<f64>>();
    Ok(EvalSummary {
        episodes: tasks.len(),
        mse_noisy: Stat::of(&collect(|m| m.mse_noisy)),
        mse_clean: Stat::of(&collect(|m| m.mse_clean)),
        accuracy: Stat::of(&collect(|m| m.accuracy)),
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation score.
    pub best: MlpModel,
    pub best_episode: u64,
    pub best_val: Option<EvalSummary>,
    pub last: MlpModel,
    pub records: Vec<MetricsRecord>,
}

/// One SGD meta-update per task, in order. Tasks flagged in `with_target` are
/// trained under S/T, the rest under S/Q. Every `val_every` episodes (and after
/// the last one) the model is validated; the best one is returned.
pub fn meta_train(
    algorithm: Algorithm,
    init: &MlpModel,
    cfg: &ProtocolConfig,
    train: &[TaskRef<'_>],
    with_target: &[bool],
    teachers: &mut dyn TeacherSource,
    val: &[TaskRef<'_>],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.len() != with_target.len() {
        return Err(Error::Shape(format!("{} tasks but {} target flags", train.len(), with_target.len())));
    }
    let mut model = init.clone();
    let mut opt = OptimizerState::new(model.num_params(), cfg.learning_rate, cfg.momentum, cfg.weight_decay)?
        .with_schedule(cfg.schedule())
        .with_max_grad_norm(cfg.max_grad_norm);
    let start = Instant::now();
    let mut records = Vec::new();
    let mut best: Option<(f64, u64, MlpModel, EvalSummary)> = None;
    let mut window = Vec::with_capacity(cfg.val_every);
    for (i, (&task, &has)) in train.iter().zip(with_target).enumerate() {
        let episode = i as u64 + 1;
        let teacher = if has { Some(teachers.teacher(task)?) } else { None };
        let step = episode_gradient(algorithm, &model, task, teacher.as_ref(), cfg).and_then(|g| {
            if !g.loss.is_finite() {
                return Err(Error::NonFinite(format!("episode loss {}", g.loss)));
            }
            let lr = opt.effective_lr();
            sgd_step(&mut model, &g, &mut opt)?;
            Ok((g.loss, lr))
        });
        let (loss, lr) = match step {
            Ok(v) => v,
            Err(e) if e.is_numerical() => {
                log::error!("meta-training diverged at episode {episode}: {e}");
                return Err(Error::Diverged {
                    episode,
                    last_good: Box::new(model),
                });
            }
            Err(e) => return Err(e),
        };
        opt.advance();
        window.push(loss);
        if episode % cfg.val_every as u64 == 0 || i + 1 == train.len() {
            let wall = start.elapsed().as_secs_f64();
            records.push(MetricsRecord {
                schema: METRICS_SCHEMA,
                episode,
                split: "train".into(),
                loss: Some(window.iter().sum::<f64>() / window.len() as f64),
                mse_noisy: None,
                mse_clean: None,
                accuracy: None,
                lr_eff: lr,
                wall_clock_s: wall,
            });
            window.clear();
            if !val.is_empty() {
                let summary = meta_eval(algorithm, &model, val, cfg)?;
                let score = summary.score();
                log::debug!("episode {episode}: validation score {score:.5}");
                records.push(MetricsRecord {
                    schema: METRICS_SCHEMA,
                    episode,
                    split: "val".into(),
                    loss: None,
                    mse_noisy: summary.mse_noisy.map(|s| s.mean),
                    mse_clean: summary.mse_clean.map(|s| s.mean),
                    accuracy: summary.accuracy.map(|s| s.mean),
                    lr_eff: lr,
                    wall_clock_s: start.elapsed().as_secs_f64(),
                });
                if best.as_ref().is_none_or(|b| score > b.0) {
                    best = Some((score, episode, model.clone(), summary));
                }
            }
        }
    }
    let (best_episode, best_model, best_val) = match best {
        Some((_, ep, m, s)) => (ep, m, Some(s)),
        None => (train.len() as u64, model.clone(), None),
    };
    Ok(TrainOutcome {
        best: best_model,
        best_episode,
        best_val,
        last: model,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocols::{AnalyticTeacher, Protocol, Reduction};
    use crate::tasks::{sample_sinusoid_task, SinusoidConfig, SinusoidTask};
    use crate::util::rng;

    fn tasks(n: usize, seed: u64) -> Vec<SinusoidTask> {
        let mut r = rng(seed);
        (0..n).map(|_| sample_sinusoid_task(&mut r, &SinusoidConfig::default(), true)).collect()
    }

    fn small_cfg() -> ProtocolConfig {
        ProtocolConfig {
            protocol: Protocol::St,
            val_every: 20,
            ..ProtocolConfig::default()
        }
    }

    #[test]
    fn oracle_and_zero_regressors() {
        let t = SinusoidTask {
            a: 1.0,
            b: 1.0,
            c: 0.0,
            support: vec![],
            query: (0..2001)
                .map(|i| {
                    let x = -std::f64::consts::PI + i as f64 * std::f64::consts::PI / 1000.0;
                    crate::tasks::SinePoint { x, y: x.sin(), noise: 0.0 }
                })
                .collect(),
        };
        let mut t = t;
        t.support = t.query[..5].to_vec();
        let zero = MlpModel::zeros(&[1, 4, 1], crate::numerics::Activation::Relu).unwrap();
        let m = eval_task(Algorithm::Maml, &zero, TaskRef::Sine(&t), &ProtocolConfig { inner_lr: 0.0, ..ProtocolConfig::default() }).unwrap();
        assert!((m.mse_clean.unwrap() - 0.5).abs() < 1e-3);
        assert_eq!(m.mse_noisy, m.mse_clean);
    }

    #[test]
    fn empty_eval_is_rejected() {
        let zero = MlpModel::zeros(&[1, 1], crate::numerics::Activation::Relu).unwrap();
        assert!(matches!(meta_eval(Algorithm::Maml, &zero, &[], &ProtocolConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn training_is_reproducible_and_learns() {
        let train = tasks(60, 1);
        let val = tasks(20, 2);
        let tr: Vec<TaskRef> = train.iter().map(TaskRef::Sine).collect();
        let vr: Vec<TaskRef> = val.iter().map(TaskRef::Sine).collect();
        let init = MlpModel::init(&[1, 16, 16, 1], 3).unwrap();
        let cfg = small_cfg();
        let flags = vec![true; tr.len()];
        let a = meta_train(Algorithm::Maml, &init, &cfg, &tr, &flags, &mut AnalyticTeacher, &vr).unwrap();
        let b = meta_train(Algorithm::Maml, &init, &cfg, &tr, &flags, &mut AnalyticTeacher, &vr).unwrap();
        let strip = |r: &[MetricsRecord]| r.iter().map(|m| (m.episode, m.loss, m.mse_noisy)).collect::<Vec<_>>();
        assert_eq!(strip(&a.records), strip(&b.records));
        assert_eq!(a.best, b.best);
        assert_eq!(a.records.iter().filter(|r| r.split == "val").count(), 3);
        let before = meta_eval(Algorithm::Maml, &init, &vr, &cfg).unwrap();
        assert!(a.best_val.unwrap().score() >= before.score());
    }

    #[test]
    fn divergence_returns_last_good_model() {
        let train = tasks(20, 1);
        let tr: Vec<TaskRef> = train.iter().map(TaskRef::Sine).collect();
        let init = MlpModel::init(&[1, 16, 16, 1], 3).unwrap();
        let cfg = ProtocolConfig {
            learning_rate: 1e6,
            reduction: Reduction::Sum,
            ..ProtocolConfig::default()
        };
        match meta_train(Algorithm::Maml, &init, &cfg, &tr, &[false; 20], &mut AnalyticTeacher, &[]) {
            Err(Error::Diverged { episode, last_good }) => {
                assert!(episode >= 1);
                assert!(last_good.flat().iter().all(|p| p.is_finite()));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
