//! Task-specific solvers built from a support set and the meta-model:
//! one-step MAML adaptation, ProtoNet classification with inner-product
//! logits, and the similarity-weighted ProtoNet regressor.
//!
//! The differentiable forms of the ProtoNet solvers are expressed as
//! [`OutputLoss`] implementations over the embedding matrix of the episode,
//! whose first rows are always the support instances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{adapt, Matrix, MlpModel, Objective, OutputLoss, Scalar, SquaredError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Maml,
    ProtoCls,
    ProtoReg,
}

/// Per-class mean embeddings of the support set, one row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub centers: Matrix,
}

impl PrototypeSet {
    pub fn n_way(&self) -> usize {
        self.centers.rows()
    }
}

/// A solver produced from one support set.
#[derive(Clone, Debug)]
pub enum AdaptedSolver<'a> {
    Maml {
        adapted: MlpModel,
    },
    ProtoClassifier {
        phi: &'a MlpModel,
        prototypes: PrototypeSet,
    },
    ProtoRegressor {
        phi: &'a MlpModel,
        support_embeddings: Matrix,
        support_y: Vec<f64>,
    },
}

impl AdaptedSolver<'_> {
    pub fn kind(&self) -> SolverKind {
        match self {
            AdaptedSolver::Maml { .. } => SolverKind::Maml,
            AdaptedSolver::ProtoClassifier { .. } => SolverKind::ProtoCls,
            AdaptedSolver::ProtoRegressor { .. } => SolverKind::ProtoReg,
        }
    }

    /// Scalar predictions of a regression solver.
    pub fn predict_values(&self, inputs: &Matrix) -> Result<Vec<f64>> {
        match self {
            AdaptedSolver::Maml { adapted } => {
                let out = adapted.forward(inputs)?;
                if out.cols() != 1 {
                    return Err(Error::Shape(format!("regression head has {} outputs", out.cols())));
                }
                Ok(out.into_data())
            }
            AdaptedSolver::ProtoRegressor {
                phi,
                support_embeddings,
                support_y,
            } => {
                let emb = phi.forward(inputs)?;
                Ok(similarity_regression(support_embeddings, support_y, &emb))
            }
            AdaptedSolver::ProtoClassifier { .. } => {
                Err(Error::Shape("a classifier does not produce scalar predictions".into()))
            }
        }
    }

    /// Class distributions of a classification solver.
    pub fn predict_proba(&self, inputs: &Matrix) -> Result<Matrix> {
        match self {
            AdaptedSolver::ProtoClassifier { phi, prototypes } => protonet_predict(phi, prototypes, inputs),
            _ => Err(Error::Shape("a regressor does not produce class distributions".into())),
        }
    }
}

/// θ − η ∇_θ Σ_support (g(x; θ) − y)², repeated `steps` times.
pub fn maml_adapt(
    theta: &MlpModel,
    support_x: &Matrix,
    support_y: &[f64],
    eta: f64,
    steps: usize,
) -> Result<AdaptedSolver<'static>> {
    if support_y.is_empty() {
        return Err(Error::Config("MAML adaptation needs a non-empty support set".into()));
    }
    let loss = SquaredError::new(Matrix::column(support_y));
    let adapted = adapt(theta, &Objective::new(support_x, &loss), eta, steps)?
        .pop()
        .expect("trajectory is non-empty");
    Ok(AdaptedSolver::Maml { adapted })
}

fn class_counts(labels: &[usize], n_way: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; n_way];
    for &l in labels {
        if l >= n_way {
            return Err(Error::Shape(format!("label {l} outside {n_way} classes")));
        }
        counts[l] += 1;
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Shape(format!("class {missing} has no support instance")));
    }
    Ok(counts)
}

/// Class means of embedded support rows.
pub fn prototypes_from_embeddings(emb: &Matrix, labels: &[usize], n_way: usize) -> Result<PrototypeSet> {
    let counts = class_counts(labels, n_way)?;
    let mut centers = Matrix::zeros(n_way, emb.cols());
    for (r, &l) in labels.iter().enumerate() {
        for (c, &v) in centers.row_mut(l).iter_mut().zip(emb.row(r)) {
            *c += v;
        }
    }
    for (l, &n) in counts.iter().enumerate() {
        for c in centers.row_mut(l) {
            *c /= n as f64;
        }
    }
    Ok(PrototypeSet { centers })
}

/// `c_n = (1/K) Σ_{y_i = n} φ(x_i)`.
pub fn protonet_prototypes(phi: &MlpModel, support_x: &Matrix, labels: &[usize], n_way: usize) -> Result<PrototypeSet> {
    if support_x.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} support inputs but {} labels",
            support_x.rows(),
            labels.len()
        )));
    }
    prototypes_from_embeddings(&phi.forward(support_x)?, labels, n_way)
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax over inner products between each embedded row and every prototype.
pub fn proto_probabilities(prototypes: &PrototypeSet, emb: &Matrix) -> Matrix {
    let n = prototypes.n_way();
    let mut out = Matrix::zeros(emb.rows(), n);
    for r in 0..emb.rows() {
        let logits: Vec<f64> = (0..n)
            .map(|k| prototypes.centers.row(k).iter().zip(emb.row(r)).map(|(a, b)| a * b).sum())
            .collect();
        out.row_mut(r).copy_from_slice(&softmax(&logits));
    }
    out
}

/// `ŷ_n = softmax_n ⟨c_n, φ(x)⟩` for every input row.
pub fn protonet_predict(phi: &MlpModel, prototypes: &PrototypeSet, inputs: &Matrix) -> Result<Matrix> {
    if prototypes.n_way() < 2 {
        return Err(Error::Config("a prototype classifier needs at least two classes".into()));
    }
    Ok(proto_probabilities(prototypes, &phi.forward(inputs)?))
}

fn similarity_regression(support_emb: &Matrix, support_y: &[f64], emb: &Matrix) -> Vec<f64> {
    (0..emb.rows())
        .map(|r| {
            let sims: Vec<f64> = (0..support_emb.rows())
                .map(|i| support_emb.row(i).iter().zip(emb.row(r)).map(|(a, b)| a * b).sum())
                .collect();
            softmax(&sims).iter().zip(support_y).map(|(w, y)| w * y).sum()
        })
        .collect()
}

/// `ŷ = Σ_i w_i y_i` with `w = softmax_i ⟨φ(x_i), φ(x)⟩` over the support set.
pub fn protoreg_predict(phi: &MlpModel, support_x: &Matrix, support_y: &[f64], inputs: &Matrix) -> Result<Vec<f64>> {
    if support_y.is_empty() || support_x.rows() != support_y.len() {
        return Err(Error::Config(format!(
            "similarity regression needs matching non-empty support ({} inputs, {} labels)",
            support_x.rows(),
            support_y.len()
        )));
    }
    let se = phi.forward(support_x)?;
    Ok(similarity_regression(&se, support_y, &phi.forward(inputs)?))
}

/// Builds the regression solver for a support set.
pub fn protoreg_solver<'a>(phi: &'a MlpModel, support_x: &Matrix, support_y: &[f64]) -> Result<AdaptedSolver<'a>> {
    if support_y.is_empty() || support_x.rows() != support_y.len() {
        return Err(Error::Config("similarity regression needs a non-empty support set".into()));
    }
    Ok(AdaptedSolver::ProtoRegressor {
        phi,
        support_embeddings: phi.forward(support_x)?,
        support_y: support_y.to_vec(),
    })
}

pub fn protonet_solver<'a>(phi: &'a MlpModel, support_x: &Matrix, labels: &[usize], n_way: usize) -> Result<AdaptedSolver<'a>> {
    Ok(AdaptedSolver::ProtoClassifier {
        phi,
        prototypes: protonet_prototypes(phi, support_x, labels, n_way)?,
    })
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Differentiable episode loss of a prototype classifier.
///
/// Rows `0..support_labels.len()` of the embedding matrix are the support set;
/// each evaluated row contributes `Σ_k −q_k log softmax(⟨c, e⟩)_k`, plus a
/// constant offset (used to turn cross-entropy against a teacher into KL).
#[derive(Clone, Debug)]
pub struct ProtoClassifierLoss {
    n_way: usize,
    support_labels: Vec<usize>,
    counts: Vec<usize>,
    eval_rows: Vec<usize>,
    targets: Matrix,
    offset: f64,
}

impl ProtoClassifierLoss {
    /// Cross-entropy on query rows, which follow the support rows.
    pub fn query_cross_entropy(support_labels: &[usize], query_labels: &[usize], n_way: usize) -> Result<Self> {
        let ns = support_labels.len();
        let targets = Matrix::from_fn(query_labels.len(), n_way, |r, c| {
            if query_labels[r] == c {
                1.0
            } else {
                0.0
            }
        });
        Self::new(
            support_labels,
            n_way,
            (ns..ns + query_labels.len()).collect(),
            targets,
            0.0,
        )
    }

    /// `Σ_support (1−λ) CE(g(x_i), y_i) + λ KL(T(x_i) ‖ g(x_i))`, evaluated on the
    /// support rows themselves. `teacher` holds one distribution per support row.
    pub fn support_distillation(support_labels: &[usize], teacher: &Matrix, lambda: f64, n_way: usize) -> Result<Self> {
        if teacher.rows() != support_labels.len() || teacher.cols() != n_way {
            return Err(Error::Shape(format!(
                "teacher is {}x{}, expected {}x{n_way}",
                teacher.rows(),
                teacher.cols(),
                support_labels.len()
            )));
        }
        let targets = Matrix::from_fn(support_labels.len(), n_way, |r, c| {
            let hard = if support_labels[r] == c { 1.0 } else { 0.0 };
            (1.0 - lambda) * hard + lambda * teacher.get(r, c)
        });
        let offset = lambda
            * teacher
                .data()
                .iter()
                .filter(|&&t| t > 0.0)
                .map(|&t| t * t.max(1e-12).ln())
                .sum::<f64>();
        Self::new(support_labels, n_way, (0..support_labels.len()).collect(), targets, offset)
    }

    fn new(support_labels: &[usize], n_way: usize, eval_rows: Vec<usize>, targets: Matrix, offset: f64) -> Result<Self> {
        let counts = class_counts(support_labels, n_way)?;
        Ok(ProtoClassifierLoss {
            n_way,
            support_labels: support_labels.to_vec(),
            counts,
            eval_rows,
            targets,
            offset,
        })
    }

    pub fn rows_needed(&self) -> usize {
        self.eval_rows.iter().copied().max().map_or(0, |m| m + 1).max(self.support_labels.len())
    }
}

impl OutputLoss for ProtoClassifierLoss {
    fn evaluate<S: Scalar>(&self, emb: &Matrix<S>) -> (S, Matrix<S>) {
        let d = emb.cols();
        let mut centers = Matrix::<S>::zeros(self.n_way, d);
        for (r, &l) in self.support_labels.iter().enumerate() {
            for (c, &v) in centers.row_mut(l).iter_mut().zip(emb.row(r)) {
                *c += v;
            }
        }
        for (l, &n) in self.counts.iter().enumerate() {
            let inv = 1.0 / n as f64;
            for c in centers.row_mut(l) {
                *c = c.scale(inv);
            }
        }
        let mut grad = Matrix::<S>::zeros(emb.rows(), d);
        let mut d_centers = Matrix::<S>::zeros(self.n_way, d);
        let mut total = S::from_f64(self.offset);
        for (t, &row) in self.eval_rows.iter().enumerate() {
            let e = emb.row(row);
            let logits: Vec<S> = (0..self.n_way).map(|k| dot(centers.row(k), e)).collect();
            let logp = crate::numerics::log_softmax(&logits);
            let q = self.targets.row(t);
            let mass: f64 = q.iter().sum();
            for k in 0..self.n_way {
                if q[k] != 0.0 {
                    total -= logp[k].scale(q[k]);
                }
                let gz = logp[k].exp().scale(mass) - S::from_f64(q[k]);
                if gz.is_zero() {
                    continue;
                }
                for (g, &c) in grad.row_mut(row).iter_mut().zip(centers.row(k)) {
                    *g += gz * c;
                }
                for (g, &v) in d_centers.row_mut(k).iter_mut().zip(e) {
                    *g += gz * v;
                }
            }
        }
        for (r, &l) in self.support_labels.iter().enumerate() {
            let inv = 1.0 / self.counts[l] as f64;
            for (g, &dc) in grad.row_mut(r).iter_mut().zip(d_centers.row(l)) {
                *g += dc.scale(inv);
            }
        }
        (total, grad)
    }
}

/// Differentiable loss of the similarity-weighted regressor.
///
/// Rows `0..support_y.len()` are the support set; every evaluated row `r`
/// contributes `(1−λ)(ŷ_r − y_r)² + λ(ŷ_r − T_r)²`. Without a teacher, λ is 0.
#[derive(Clone, Debug)]
pub struct ProtoRegressionLoss {
    support_y: Vec<f64>,
    eval_rows: Vec<usize>,
    labels: Vec<f64>,
    teacher: Option<Vec<f64>>,
    lambda: f64,
}

impl ProtoRegressionLoss {
    /// Squared error on query rows that follow the support rows.
    pub fn query_squared_error(support_y: &[f64], query_y: &[f64]) -> Self {
        let ns = support_y.len();
        ProtoRegressionLoss {
            support_y: support_y.to_vec(),
            eval_rows: (ns..ns + query_y.len()).collect(),
            labels: query_y.to_vec(),
            teacher: None,
            lambda: 0.0,
        }
    }

    /// Blended label/teacher loss on the support rows themselves.
    pub fn support_distillation(support_y: &[f64], teacher: &[f64], lambda: f64) -> Result<Self> {
        if teacher.len() != support_y.len() {
            return Err(Error::Shape(format!(
                "{} teacher values for {} support points",
                teacher.len(),
                support_y.len()
            )));
        }
        Ok(ProtoRegressionLoss {
            support_y: support_y.to_vec(),
            eval_rows: (0..support_y.len()).collect(),
            labels: support_y.to_vec(),
            teacher: Some(teacher.to_vec()),
            lambda,
        })
    }
}

impl OutputLoss for ProtoRegressionLoss {
    fn evaluate<S: Scalar>(&self, emb: &Matrix<S>) -> (S, Matrix<S>) {
        let ns = self.support_y.len();
        let mut grad = Matrix::<S>::zeros(emb.rows(), emb.cols());
        let mut total = S::zero();
        for (t, &row) in self.eval_rows.iter().enumerate() {
            let e = emb.row(row);
            let sims: Vec<S> = (0..ns).map(|i| dot(emb.row(i), e)).collect();
            let logw = crate::numerics::log_softmax(&sims);
            let w: Vec<S> = logw.iter().map(|v| v.exp()).collect();
            let mut pred = S::zero();
            for (wi, &yi) in w.iter().zip(&self.support_y) {
                pred += wi.scale(yi);
            }
            let y = self.labels[t];
            let (blend, value) = match &self.teacher {
                Some(teacher) => {
                    let tv = teacher[t];
                    let ry = pred - S::from_f64(y);
                    let rt = pred - S::from_f64(tv);
                    (
                        (1.0 - self.lambda) * y + self.lambda * tv,
                        (ry * ry).scale(1.0 - self.lambda) + (rt * rt).scale(self.lambda),
                    )
                }
                None => {
                    let ry = pred - S::from_f64(y);
                    (y, ry * ry)
                }
            };
            total += value;
            let dpred = (pred - S::from_f64(blend)).scale(2.0);
            for i in 0..ns {
                let gi = dpred * w[i] * (S::from_f64(self.support_y[i]) - pred);
                if gi.is_zero() {
                    continue;
                }
                let ei: Vec<S> = emb.row(i).to_vec();
                for (g, &v) in grad.row_mut(i).iter_mut().zip(e) {
                    *g += gi * v;
                }
                for (g, &v) in grad.row_mut(row).iter_mut().zip(&ei) {
                    *g += gi * v;
                }
            }
        }
        (total, grad)
    }
}
