//! Target models: the analytic sinusoid curve, the Bayes-optimal Gaussian
//! classifier, and networks fine-tuned from a pretrained backbone.

mod cache;
mod pretrain;

use serde::{Deserialize, Serialize};

pub use cache::{cache_key, CacheManifest, ManifestEntry, TargetCache, MANIFEST_FILE};
pub use pretrain::{
    finetune_target, pretrain, sliced_target, FinetuneConfig, PretrainConfig, PretrainLog, PretrainedModel,
};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, MlpModel};
use crate::solvers::softmax;
use crate::tasks::{Gaussian2, GaussianClass, GaussianDataset, SinusoidTask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum TargetKind {
    AnalyticSinusoid {
        a: f64,
        b: f64,
        c: f64,
    },
    BayesGaussian {
        class_ids: Vec<usize>,
        means: Vec<[f64; 2]>,
        covariances: Vec<[[f64; 2]; 2]>,
    },
    FineTunedNet {
        trunk: MlpModel,
        head: MlpModel,
        class_ids: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetModel {
    pub kind: TargetKind,
    /// Free-form description of how the target was built.
    pub provenance: String,
}

/// `a sin(bx − c)`.
pub fn analytic_target(task: &SinusoidTask, x: f64) -> f64 {
    task.a * (task.b * x - task.c).sin()
}

/// Posterior of the Bayes classifier at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct BayesPosterior {
    pub probs: Vec<f64>,
    /// Index of the largest log density; the lowest index wins ties.
    pub argmax: usize,
    /// Set when every class density vanished and the uniform fallback was used.
    pub fallback: bool,
}

pub fn first_argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Equal-prior posterior over the given class densities.
pub fn bayes_posterior(classes: &[Gaussian2], x: [f64; 2]) -> BayesPosterior {
    let logs: Vec<f64> = classes.iter().map(|g| g.log_density(x)).collect();
    if logs.iter().all(|l| *l == f64::NEG_INFINITY) {
        log::warn!("all class densities vanish at {x:?}; using a uniform posterior");
        let n = classes.len();
        return BayesPosterior {
            probs: vec![1.0 / n as f64; n],
            argmax: 0,
            fallback: true,
        };
    }
    BayesPosterior {
        probs: softmax(&logs),
        argmax: first_argmax(&logs),
        fallback: false,
    }
}

/// `p(n | x) ∝ N(x; μ_n, Σ_n)` under equal priors.
pub fn bayes_predict(classes: &[GaussianClass], x: [f64; 2]) -> BayesPosterior {
    let g: Vec<Gaussian2> = classes.iter().map(GaussianClass::gaussian).collect();
    bayes_posterior(&g, x)
}

impl TargetModel {
    pub fn analytic(task: &SinusoidTask) -> Self {
        TargetModel {
            kind: TargetKind::AnalyticSinusoid {
                a: task.a,
                b: task.b,
                c: task.c,
            },
            provenance: "analytic".into(),
        }
    }

    pub fn bayes(dataset: &GaussianDataset, class_ids: &[usize]) -> Result<Self> {
        let mut means = Vec::with_capacity(class_ids.len());
        let mut covariances = Vec::with_capacity(class_ids.len());
        for &id in class_ids {
            let c = dataset.class(id)?;
            means.push(c.mu);
            covariances.push(c.sigma);
        }
        Ok(TargetModel {
            kind: TargetKind::BayesGaussian {
                class_ids: class_ids.to_vec(),
                means,
                covariances,
            },
            provenance: "bayes".into(),
        })
    }

    pub fn class_ids(&self) -> Option<&[usize]> {
        match &self.kind {
            TargetKind::AnalyticSinusoid { .. } => None,
            TargetKind::BayesGaussian { class_ids, .. } | TargetKind::FineTunedNet { class_ids, .. } => {
                Some(class_ids)
            }
        }
    }

    pub fn is_classifier(&self) -> bool {
        !matches!(self.kind, TargetKind::AnalyticSinusoid { .. })
    }

    /// Regression output at each input.
    pub fn predict_values(&self, xs: &[f64]) -> Result<Vec<f64>> {
        match self.kind {
            TargetKind::AnalyticSinusoid { a, b, c } => Ok(xs.iter().map(|x| a * (b * x - c).sin()).collect()),
            _ => Err(Error::Shape("classification target queried for scalar values".into())),
        }
    }

    /// Class distribution for each 2-d input row, over the target's classes
    /// in their stored order.
    pub fn predict_proba(&self, inputs: &Matrix) -> Result<Matrix> {
        match &self.kind {
            TargetKind::AnalyticSinusoid { .. } => {
                Err(Error::Shape("regression target queried for class probabilities".into()))
            }
            TargetKind::BayesGaussian { means, covariances, .. } => {
                if inputs.cols() != 2 {
                    return Err(Error::Shape(format!("expected 2-d inputs, got {}", inputs.cols())));
                }
                let g: Vec<Gaussian2> = means.iter().zip(covariances).map(|(&m, &s)| Gaussian2::new(m, s)).collect();
                let mut out = Matrix::zeros(inputs.rows(), g.len());
                for r in 0..inputs.rows() {
                    let x = [inputs.get(r, 0), inputs.get(r, 1)];
                    out.row_mut(r).copy_from_slice(&bayes_posterior(&g, x).probs);
                }
                Ok(out)
            }
            TargetKind::FineTunedNet { trunk, head, .. } => {
                let logits = head.forward(&trunk.forward(inputs)?)?;
                let mut out = Matrix::zeros(logits.rows(), logits.cols());
                for r in 0..logits.rows() {
                    out.row_mut(r).copy_from_slice(&softmax(logits.row(r)));
                }
                Ok(out)
            }
        }
    }

    /// Hard predictions as local class indices.
    pub fn predict_class(&self, inputs: &Matrix) -> Result<Vec<usize>> {
        if let TargetKind::BayesGaussian { means, covariances, .. } = &self.kind {
            let g: Vec<Gaussian2> = means.iter().zip(covariances).map(|(&m, &s)| Gaussian2::new(m, s)).collect();
            return Ok((0..inputs.rows())
                .map(|r| bayes_posterior(&g, [inputs.get(r, 0), inputs.get(r, 1)]).argmax)
                .collect());
        }
        let p = self.predict_proba(inputs)?;
        Ok(p.iter_rows().map(first_argmax).collect())
    }
}

/// Fraction of the auxiliary instances of `class_ids` that the target assigns
/// to their own class. Local class `n` is `class_ids[n]`.
pub fn eval_target_quality(target: &TargetModel, dataset: &GaussianDataset, class_ids: &[usize]) -> Result<f64> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (n, &id) in class_ids.iter().enumerate() {
        for x in dataset.aux_instances(id)? {
            rows.push(*x);
            labels.push(n);
        }
    }
    if rows.is_empty() {
        return Err(Error::Config("no auxiliary instances for the requested classes".into()));
    }
    let pred = target.predict_class(&Matrix::from_rows(&rows)?)?;
    let hits = pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{gen_gaussian_dataset, GaussianConfig, Split};
    use crate::util::rng;
    use rand::Rng;

    fn task(a: f64, b: f64, c: f64) -> SinusoidTask {
        SinusoidTask {
            a,
            b,
            c,
            support: vec![],
            query: vec![],
        }
    }

    #[test]
    fn analytic_examples() {
        let t = task(2.0, 2.0, 1.0);
        assert_eq!(analytic_target(&t, 1.0 / 2.0), 0.0);
        assert!((analytic_target(&task(1.0, 1.0, 0.0), std::f64::consts::FRAC_PI_2) - 1.0).abs() < 1e-15);
        let mut r = rng(1);
        for _ in 0..1000 {
            let x: f64 = r.random_range(-50.0..50.0);
            assert!(analytic_target(&t, x).abs() <= 2.0);
        }
    }

    #[test]
    fn bayes_symmetry_and_means() {
        let eye = [[1.0, 0.0], [0.0, 1.0]];
        let g = [Gaussian2::new([-1.0, 0.0], eye), Gaussian2::new([1.0, 0.0], eye)];
        let p = bayes_posterior(&g, [0.0, 3.0]);
        assert!((p.probs[0] - 0.5).abs() < 1e-15 && (p.probs[1] - 0.5).abs() < 1e-15);
        assert_eq!(p.argmax, 0);
        let far = [
            Gaussian2::new([-8.0, 0.0], eye),
            Gaussian2::new([0.0, 8.0], eye),
            Gaussian2::new([8.0, 0.0], eye),
        ];
        for (n, g) in far.iter().enumerate() {
            assert_eq!(bayes_posterior(&far, g.mu).argmax, n);
        }
    }

    #[test]
    fn bayes_uniform_fallback() {
        let line = [[1.0, 0.0], [0.0, 0.0]];
        let g = [Gaussian2::new([0.0, 0.0], line), Gaussian2::new([0.0, 1.0], line)];
        let p = bayes_posterior(&g, [0.0, 0.5]);
        assert!(p.fallback);
        assert_eq!(p.probs, vec![0.5, 0.5]);
    }

    #[test]
    fn bayes_target_is_normalized_and_accurate_on_separated_classes() {
        let ds = gen_gaussian_dataset(3, &GaussianConfig::default()).unwrap();
        let ids: Vec<usize> = ds.class_ids(Split::MetaTrain)[..5].to_vec();
        let t = TargetModel::bayes(&ds, &ids).unwrap();
        let probe = Matrix::from_rows(&[[0.0, 0.0], [3.0, -4.0], [9.0, 9.0]]).unwrap();
        for row in t.predict_proba(&probe).unwrap().iter_rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let acc = eval_target_quality(&t, &ds, &ids).unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn separable_classes_are_classified_perfectly() {
        let mut ds = gen_gaussian_dataset(3, &GaussianConfig::default()).unwrap();
        for (i, c) in ds.classes.iter_mut().enumerate().take(3) {
            let shift = [100.0 * i as f64, 0.0];
            for x in c.instances.iter_mut() {
                x[0] += shift[0] - c.mu[0];
                x[1] -= c.mu[1];
            }
            c.mu = shift;
        }
        let t = TargetModel::bayes(&ds, &[0, 1, 2]).unwrap();
        assert_eq!(eval_target_quality(&t, &ds, &[0, 1, 2]).unwrap(), 1.0);
    }

    #[test]
    fn regression_and_classification_queries_are_not_mixed() {
        let t = TargetModel::analytic(&task(1.0, 1.0, 0.0));
        assert!(t.predict_proba(&Matrix::zeros(1, 2)).is_err());
        assert_eq!(t.predict_values(&[0.0]).unwrap(), vec![0.0]);
    }
}
