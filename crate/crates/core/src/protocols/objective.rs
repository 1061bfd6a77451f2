use super::losses::{cross_entropy_sum, squared_error_sum, st_classification_loss, st_regression_loss, BlendedSquaredError};
use super::{Algorithm, ProtocolConfig, Reduction};
use crate::error::{Error, Result};
use crate::numerics::{backprop, grad_through_inner_step, Gradient, Matrix, MlpModel, Objective, SquaredError};
use crate::solvers::{AdaptedSolver, ProtoClassifierLoss, ProtoRegressionLoss};
use crate::targets::{TargetCache, TargetModel};
use crate::tasks::{Episode, GaussianDataset, SinusoidTask};

/// A meta-training or evaluation task of either study.
#[derive(Clone, Copy, Debug)]
pub enum TaskRef<'a> {
    Sine(&'a SinusoidTask),
    Gauss(&'a Episode),
}

/// Target outputs on a task's support inputs, in the task's label order.
#[derive(Clone, Debug, PartialEq)]
pub enum Teacher {
    Values(Vec<f64>),
    Probs(Matrix),
}

pub trait TeacherSource {
    fn teacher(&mut self, task: TaskRef<'_>) -> Result<Teacher>;
}

/// The true curve of a sinusoid task.
pub struct AnalyticTeacher;

impl TeacherSource for AnalyticTeacher {
    fn teacher(&mut self, task: TaskRef<'_>) -> Result<Teacher> {
        match task {
            TaskRef::Sine(t) => TargetModel::analytic(t)
                .predict_values(&t.support_inputs().into_data())
                .map(Teacher::Values),
            TaskRef::Gauss(_) => Err(Error::Config("analytic targets exist only for sinusoid tasks".into())),
        }
    }
}

/// Reorders a target's class columns into an episode's local label order.
fn episode_probs(target: &TargetModel, episode: &Episode, inputs: &Matrix) -> Result<Matrix> {
    let ids = target
        .class_ids()
        .ok_or_else(|| Error::Config("regression target used for a classification task".into()))?;
    let cols: Vec<usize> = episode
        .class_ids
        .iter()
        .map(|id| {
            ids.iter()
                .position(|c| c == id)
                .ok_or_else(|| Error::Config(format!("target does not cover class {id}")))
        })
        .collect::<Result<_>>()?;
    let p = target.predict_proba(inputs)?;
    Ok(Matrix::from_fn(p.rows(), cols.len(), |r, c| p.get(r, cols[c])))
}

/// Targets looked up by the episode's class set.
pub struct CachedTeacher<'c> {
    pub cache: &'c mut TargetCache,
}

impl TeacherSource for CachedTeacher<'_> {
    fn teacher(&mut self, task: TaskRef<'_>) -> Result<Teacher> {
        match task {
            TaskRef::Gauss(e) => {
                let target = self.cache.load(&e.class_ids)?;
                episode_probs(target, e, &e.support_inputs()).map(Teacher::Probs)
            }
            TaskRef::Sine(_) => Err(Error::Config("cached targets exist only for Gaussian tasks".into())),
        }
    }
}

/// The Bayes-optimal classifier of the episode's classes.
pub struct BayesTeacher<'d> {
    pub dataset: &'d GaussianDataset,
}

impl TeacherSource for BayesTeacher<'_> {
    fn teacher(&mut self, task: TaskRef<'_>) -> Result<Teacher> {
        match task {
            TaskRef::Gauss(e) => {
                let target = TargetModel::bayes(self.dataset, &e.class_ids)?;
                episode_probs(&target, e, &e.support_inputs()).map(Teacher::Probs)
            }
            TaskRef::Sine(_) => Err(Error::Config("Bayes targets exist only for Gaussian tasks".into())),
        }
    }
}

/// Labelled inputs for the value-level losses.
#[derive(Clone, Copy, Debug)]
pub enum LabeledSet<'a> {
    Regression { x: &'a Matrix, y: &'a [f64] },
    Classification { x: &'a Matrix, labels: &'a [usize] },
}

/// `Σ_query ℓ(solver(x), y)`: squared error or cross-entropy.
pub fn sq_loss(solver: &AdaptedSolver<'_>, query: LabeledSet<'_>) -> Result<f64> {
    match query {
        LabeledSet::Regression { x, y } => {
            if y.is_empty() {
                return Err(Error::Config("empty query set".into()));
            }
            squared_error_sum(&solver.predict_values(x)?, y)
        }
        LabeledSet::Classification { x, labels } => {
            if labels.is_empty() {
                return Err(Error::Config("empty query set".into()));
            }
            cross_entropy_sum(&solver.predict_proba(x)?, labels)
        }
    }
}

/// `Σ_support (1−λ) ℓ(g(x), y) + λ D(T(x), g(x))`.
pub fn st_loss_output(solver: &AdaptedSolver<'_>, teacher: &Teacher, support: LabeledSet<'_>, lambda: f64) -> Result<f64> {
    match (support, teacher) {
        (LabeledSet::Regression { x, y }, Teacher::Values(t)) => st_regression_loss(&solver.predict_values(x)?, y, t, lambda),
        (LabeledSet::Classification { x, labels }, Teacher::Probs(t)) => {
            st_classification_loss(&solver.predict_proba(x)?, labels, t, lambda)
        }
        _ => Err(Error::Config("teacher kind does not match the task".into())),
    }
}

fn scaled(mut g: Gradient, n: usize, reduction: Reduction) -> Gradient {
    if reduction == Reduction::Mean && n > 0 {
        let s = 1.0 / n as f64;
        g.values.iter_mut().for_each(|v| *v *= s);
        g.loss *= s;
    }
    g
}

/// Loss and meta-gradient of one episode. Without a teacher the episode is
/// scored on its query set; with one, on its support set against the blend
/// of labels and teacher outputs.
pub fn episode_gradient(
    algorithm: Algorithm,
    model: &MlpModel,
    task: TaskRef<'_>,
    teacher: Option<&Teacher>,
    cfg: &ProtocolConfig,
) -> Result<Gradient> {
    match (algorithm, task, teacher) {
        (Algorithm::Maml, TaskRef::Sine(t), teacher) => {
            let (sx, sy) = (t.support_inputs(), t.support_labels());
            let inner_loss = SquaredError::new(Matrix::column(&sy));
            let inner = Objective::new(&sx, &inner_loss);
            match teacher {
                None => {
                    let (qx, qy) = (t.query_inputs(), t.query_labels());
                    if qy.is_empty() {
                        return Err(Error::Config("S/Q episode without query instances".into()));
                    }
                    let outer_loss = SquaredError::new(Matrix::column(&qy));
                    let g = grad_through_inner_step(
                        model,
                        &inner,
                        &Objective::new(&qx, &outer_loss),
                        cfg.inner_lr,
                        cfg.inner_steps,
                        cfg.inner_order,
                    )?;
                    Ok(scaled(g, qy.len(), cfg.reduction))
                }
                Some(Teacher::Values(tv)) => {
                    let outer_loss = BlendedSquaredError::new(&sy, tv, cfg.lambda)?;
                    let g = grad_through_inner_step(
                        model,
                        &inner,
                        &Objective::new(&sx, &outer_loss),
                        cfg.inner_lr,
                        cfg.inner_steps,
                        cfg.inner_order,
                    )?;
                    Ok(scaled(g, sy.len(), cfg.reduction))
                }
                Some(Teacher::Probs(_)) => Err(Error::Config("class-probability teacher for a regression task".into())),
            }
        }
        (Algorithm::Protoreg, TaskRef::Sine(t), teacher) => {
            let (sx, sy) = (t.support_inputs(), t.support_labels());
            match teacher {
                None => {
                    let qy = t.query_labels();
                    if qy.is_empty() {
                        return Err(Error::Config("S/Q episode without query instances".into()));
                    }
                    let x = sx.vstack(&t.query_inputs())?;
                    let g = backprop(model, &x, &ProtoRegressionLoss::query_squared_error(&sy, &qy))?;
                    Ok(scaled(g, qy.len(), cfg.reduction))
                }
                Some(Teacher::Values(tv)) => {
                    let loss = ProtoRegressionLoss::support_distillation(&sy, tv, cfg.lambda)?;
                    Ok(scaled(backprop(model, &sx, &loss)?, sy.len(), cfg.reduction))
                }
                Some(Teacher::Probs(_)) => Err(Error::Config("class-probability teacher for a regression task".into())),
            }
        }
        (Algorithm::Protonet, TaskRef::Gauss(e), teacher) => {
            let sx = e.support_inputs();
            let sl = e.support_labels();
            let n = e.n_way();
            match teacher {
                None => {
                    let ql = e.query_labels();
                    if ql.is_empty() {
                        return Err(Error::Config("S/Q episode without query instances".into()));
                    }
                    let x = sx.vstack(&e.query_inputs())?;
                    let loss = ProtoClassifierLoss::query_cross_entropy(&sl, &ql, n)?;
                    Ok(scaled(backprop(model, &x, &loss)?, ql.len(), cfg.reduction))
                }
                Some(Teacher::Probs(tp)) => {
                    let loss = ProtoClassifierLoss::support_distillation(&sl, tp, cfg.lambda, n)?;
                    Ok(scaled(backprop(model, &sx, &loss)?, sl.len(), cfg.reduction))
                }
                Some(Teacher::Values(_)) => Err(Error::Config("scalar teacher for a classification task".into())),
            }
        }
        (a, _, _) => Err(Error::Config(format!("algorithm {a} does not apply to this task type"))),
    }
}

/// Sum of S/T episode losses over tasks flagged in `with_target` and S/Q
/// losses over the rest, with its gradient. Tasks are reduced in index order.
pub fn mixed_objective(
    algorithm: Algorithm,
    model: &MlpModel,
    tasks: &[TaskRef<'_>],
    with_target: &[bool],
    teachers: &mut dyn TeacherSource,
    cfg: &ProtocolConfig,
) -> Result<Gradient> {
    if tasks.len() != with_target.len() {
        return Err(Error::Shape(format!("{} tasks but {} target flags", tasks.len(), with_target.len())));
    }
    let mut total = Gradient::zeros(model.num_params());
    for (&task, &has) in tasks.iter().zip(with_target) {
        let teacher = if has { Some(teachers.teacher(task)?) } else { None };
        total.accumulate(&episode_gradient(algorithm, model, task, teacher.as_ref(), cfg)?)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff, relative_error, Activation, InnerOrder};
    use crate::protocols::Protocol;
    use crate::solvers::{maml_adapt, protonet_solver, protoreg_solver};
    use crate::tasks::{gen_gaussian_dataset, sample_episode, sample_sinusoid_task, GaussianConfig, SinusoidConfig, Split};
    use crate::util::rng;

    fn sine_tasks(n: usize, seed: u64) -> Vec<SinusoidTask> {
        let cfg = SinusoidConfig {
            support: 4,
            query: 5,
            ..SinusoidConfig::default()
        };
        let mut r = rng(seed);
        (0..n).map(|_| sample_sinusoid_task(&mut r, &cfg, true)).collect()
    }

    fn sum_cfg() -> ProtocolConfig {
        ProtocolConfig {
            reduction: Reduction::Sum,
            protocol: Protocol::St,
            ..ProtocolConfig::default()
        }
    }

    #[test]
    fn episode_losses_match_value_forms() {
        let tasks = sine_tasks(1, 2);
        let t = &tasks[0];
        let cfg = sum_cfg();
        let model = MlpModel::init(&[1, 8, 8, 1], 3).unwrap();
        let g = episode_gradient(Algorithm::Maml, &model, TaskRef::Sine(t), None, &cfg).unwrap();
        let solver = maml_adapt(&model, &t.support_inputs(), &t.support_labels(), cfg.inner_lr, 1).unwrap();
        let (qx, qy) = (t.query_inputs(), t.query_labels());
        let direct = sq_loss(&solver, LabeledSet::Regression { x: &qx, y: &qy }).unwrap();
        assert!((g.loss - direct).abs() < 1e-10);

        let teacher = AnalyticTeacher.teacher(TaskRef::Sine(t)).unwrap();
        let g = episode_gradient(Algorithm::Maml, &model, TaskRef::Sine(t), Some(&teacher), &cfg).unwrap();
        let (sx, sy) = (t.support_inputs(), t.support_labels());
        let direct = st_loss_output(&solver, &teacher, LabeledSet::Regression { x: &sx, y: &sy }, cfg.lambda).unwrap();
        assert!((g.loss - direct).abs() < 1e-10);

        let phi = MlpModel::init(&[1, 8, 4], 3).unwrap();
        let g = episode_gradient(Algorithm::Protoreg, &phi, TaskRef::Sine(t), Some(&teacher), &cfg).unwrap();
        let solver = protoreg_solver(&phi, &sx, &sy).unwrap();
        let direct = st_loss_output(&solver, &teacher, LabeledSet::Regression { x: &sx, y: &sy }, cfg.lambda).unwrap();
        assert!((g.loss - direct).abs() < 1e-10);
    }

    #[test]
    fn classification_losses_match_value_forms() {
        let ds = gen_gaussian_dataset(1, &GaussianConfig::default()).unwrap();
        let e = sample_episode(&ds, Split::MetaTrain, 3, 2, 2, &mut rng(4)).unwrap();
        let phi = MlpModel::init(&[2, 8, 4], 5).unwrap();
        let phi = phi.with_params(phi.flat().iter().map(|p| p * 0.3).collect()).unwrap();
        let cfg = ProtocolConfig {
            lambda: 0.8,
            ..sum_cfg()
        };
        let g = episode_gradient(Algorithm::Protonet, &phi, TaskRef::Gauss(&e), None, &cfg).unwrap();
        let solver = protonet_solver(&phi, &e.support_inputs(), &e.support_labels(), 3).unwrap();
        let (qx, ql) = (e.query_inputs(), e.query_labels());
        let direct = sq_loss(&solver, LabeledSet::Classification { x: &qx, labels: &ql }).unwrap();
        assert!((g.loss - direct).abs() < 1e-9);

        let teacher = BayesTeacher { dataset: &ds }.teacher(TaskRef::Gauss(&e)).unwrap();
        let g = episode_gradient(Algorithm::Protonet, &phi, TaskRef::Gauss(&e), Some(&teacher), &cfg).unwrap();
        let (sx, sl) = (e.support_inputs(), e.support_labels());
        let direct = st_loss_output(&solver, &teacher, LabeledSet::Classification { x: &sx, labels: &sl }, 0.8).unwrap();
        assert!((g.loss - direct).abs() < 1e-9, "{} vs {}", g.loss, direct);
    }

    #[test]
    fn teacher_columns_follow_episode_order() {
        let ds = gen_gaussian_dataset(1, &GaussianConfig::default()).unwrap();
        let e = sample_episode(&ds, Split::MetaTrain, 4, 2, 1, &mut rng(8)).unwrap();
        let mut sorted = e.class_ids.clone();
        sorted.sort_unstable();
        let target = TargetModel::bayes(&ds, &sorted).unwrap();
        let mut cache = TargetCache::in_memory("t");
        cache.store(target).unwrap();
        let Teacher::Probs(cached) = (CachedTeacher { cache: &mut cache }).teacher(TaskRef::Gauss(&e)).unwrap() else {
            panic!()
        };
        let Teacher::Probs(direct) = (BayesTeacher { dataset: &ds }).teacher(TaskRef::Gauss(&e)).unwrap() else {
            panic!()
        };
        for (a, b) in cached.data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn mismatched_pairs_are_rejected() {
        let tasks = sine_tasks(1, 2);
        let phi = MlpModel::init(&[2, 4], 1).unwrap();
        let cfg = ProtocolConfig::default();
        assert!(matches!(
            episode_gradient(Algorithm::Protonet, &phi, TaskRef::Sine(&tasks[0]), None, &cfg),
            Err(Error::Config(_))
        ));
        let mut cache = TargetCache::in_memory("t");
        let ds = gen_gaussian_dataset(1, &GaussianConfig::default()).unwrap();
        let e = sample_episode(&ds, Split::MetaTrain, 2, 1, 1, &mut rng(1)).unwrap();
        let err = mixed_objective(
            Algorithm::Protonet,
            &phi,
            &[TaskRef::Gauss(&e)],
            &[true],
            &mut CachedTeacher { cache: &mut cache },
            &cfg,
        );
        assert!(matches!(err, Err(Error::CacheMiss(_))));
    }

    #[test]
    fn zero_ratio_equals_query_objective() {
        let tasks = sine_tasks(3, 9);
        let refs: Vec<TaskRef> = tasks.iter().map(TaskRef::Sine).collect();
        let model = MlpModel::init(&[1, 8, 1], 2).unwrap();
        let cfg = ProtocolConfig::default();
        let mixed = mixed_objective(Algorithm::Maml, &model, &refs, &[false; 3], &mut AnalyticTeacher, &cfg).unwrap();
        let mut sq = Gradient::zeros(model.num_params());
        for &t in &refs {
            sq.accumulate(&episode_gradient(Algorithm::Maml, &model, t, None, &cfg).unwrap()).unwrap();
        }
        assert_eq!(mixed, sq);
    }

    fn fd_check(algorithm: Algorithm, model: &MlpModel, tasks: &[TaskRef<'_>], flags: &[bool], teachers: &mut dyn TeacherSource, cfg: &ProtocolConfig) -> f64 {
        let g = mixed_objective(algorithm, model, tasks, flags, teachers, cfg).unwrap();
        let fd = finite_diff(
            model.flat(),
            |p| {
                let m = model.with_params(p.to_vec())?;
                Ok(mixed_objective(algorithm, &m, tasks, flags, teachers, cfg)?.loss)
            },
            1e-5,
        )
        .unwrap();
        relative_error(&g.values, &fd)
    }

    #[test]
    fn mixed_gradients_match_finite_differences() {
        let tasks = sine_tasks(2, 31);
        let refs: Vec<TaskRef> = tasks.iter().map(TaskRef::Sine).collect();
        let cfg = sum_cfg();
        let maml = MlpModel::init_with(&[1, 6, 6, 1], Activation::Tanh, 4).unwrap();
        assert!(fd_check(Algorithm::Maml, &maml, &refs, &[true, false], &mut AnalyticTeacher, &cfg) < 1e-3);
        let first = ProtocolConfig {
            inner_order: InnerOrder::First,
            inner_lr: 0.0,
            ..cfg.clone()
        };
        assert!(fd_check(Algorithm::Maml, &maml, &refs, &[true, false], &mut AnalyticTeacher, &first) < 1e-3);
        let phi = MlpModel::init_with(&[1, 6, 3], Activation::Tanh, 4).unwrap();
        assert!(fd_check(Algorithm::Protoreg, &phi, &refs, &[false, true], &mut AnalyticTeacher, &cfg) < 1e-3);

        let ds = gen_gaussian_dataset(1, &GaussianConfig::default()).unwrap();
        let mut r = rng(2);
        let eps: Vec<Episode> = (0..2)
            .map(|_| sample_episode(&ds, Split::MetaTrain, 3, 2, 2, &mut r).unwrap())
            .collect();
        let grefs: Vec<TaskRef> = eps.iter().map(TaskRef::Gauss).collect();
        let phi = MlpModel::init_with(&[2, 6, 3], Activation::Tanh, 6).unwrap();
        let scale = ProtocolConfig { lambda: 0.8, ..cfg };
        let phi = phi.with_params(phi.flat().iter().map(|p| p * 0.2).collect()).unwrap();
        assert!(fd_check(Algorithm::Protonet, &phi, &grefs, &[true, false], &mut BayesTeacher { dataset: &ds }, &scale) < 1e-3);
    }
}
