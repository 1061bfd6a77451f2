//! Value-level forms of the training objectives, plus the blended squared
//! error used when a regression solver is matched to a target.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, OutputLoss, Scalar};

pub const PROB_FLOOR: f64 = 1e-12;

/// `Σ_i (pred_i − y_i)²`.
pub fn squared_error_sum(pred: &[f64], y: &[f64]) -> Result<f64> {
    if pred.len() != y.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), y.len())));
    }
    Ok(pred.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum())
}

/// `Σ_i −ln p_i[y_i]`, with probabilities floored before the log.
pub fn cross_entropy_sum(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    if probs.rows() != labels.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", probs.rows(), labels.len())));
    }
    labels
        .iter()
        .enumerate()
        .map(|(r, &l)| {
            if l >= probs.cols() {
                return Err(Error::Index(format!("label {l} outside {} classes", probs.cols())));
            }
            Ok(-probs.get(r, l).max(PROB_FLOOR).ln())
        })
        .sum()
}

/// `KL(p ‖ q) = Σ p ln(p / q)` with `0 ln 0 = 0`; both sides floored at 1e-12
/// inside the log.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("distributions of length {} and {}", p.len(), q.len())));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.max(PROB_FLOOR).ln() - qi.max(PROB_FLOOR).ln()))
        .sum::<f64>()
        .max(0.0))
}

/// Regression form of the support/target loss:
/// `Σ (1−λ)(g − y)² + λ(g − T)²`.
pub fn st_regression_loss(pred: &[f64], labels: &[f64], teacher: &[f64], lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    if pred.len() != labels.len() || pred.len() != teacher.len() {
        return Err(Error::Shape("predictions, labels and teacher outputs differ in length".into()));
    }
    Ok(pred
        .iter()
        .zip(labels)
        .zip(teacher)
        .map(|((g, y), t)| (1.0 - lambda) * (g - y) * (g - y) + lambda * (g - t) * (g - t))
        .sum())
}

/// Classification form: `Σ (1−λ) CE(g, y) + λ KL(T ‖ g)`.
pub fn st_classification_loss(probs: &Matrix, labels: &[usize], teacher: &Matrix, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    if teacher.rows() != probs.rows() || teacher.cols() != probs.cols() {
        return Err(Error::Shape("teacher and solver distributions differ in shape".into()));
    }
    let ce = cross_entropy_sum(probs, labels)?;
    let mut kl = 0.0;
    for r in 0..probs.rows() {
        kl += kl_divergence(teacher.row(r), probs.row(r))?;
    }
    Ok((1.0 - lambda) * ce + lambda * kl)
}

/// `support_loss + λ ‖γ_g − γ_T‖²`.
pub fn st_loss_param(solver_params: &[f64], target_params: &[f64], support_loss: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    if solver_params.len() != target_params.len() {
        return Err(Error::Config(format!(
            "parameter matching needs equal shapes ({} vs {})",
            solver_params.len(),
            target_params.len()
        )));
    }
    let dist: f64 = solver_params
        .iter()
        .zip(target_params)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(support_loss + lambda * dist)
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

/// `Σ_rows (1−λ)(o − y)² + λ(o − T)²` on a single-output network.
#[derive(Clone, Debug)]
pub struct BlendedSquaredError {
    labels: Vec<f64>,
    teacher: Vec<f64>,
    lambda: f64,
}

impl BlendedSquaredError {
    pub fn new(labels: &[f64], teacher: &[f64], lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        if labels.len() != teacher.len() {
            return Err(Error::Shape(format!("{} labels and {} teacher outputs", labels.len(), teacher.len())));
        }
        Ok(BlendedSquaredError {
            labels: labels.to_vec(),
            teacher: teacher.to_vec(),
            lambda,
        })
    }
}

impl OutputLoss for BlendedSquaredError {
    fn evaluate<S: Scalar>(&self, outputs: &Matrix<S>) -> (S, Matrix<S>) {
        let mut total = S::zero();
        let mut grad = Matrix::zeros(outputs.rows(), outputs.cols());
        for (r, ((&o, &y), &t)) in outputs.data().iter().zip(&self.labels).zip(&self.teacher).enumerate() {
            let ry = o - S::from_f64(y);
            let rt = o - S::from_f64(t);
            total += (ry * ry).scale(1.0 - self.lambda) + (rt * rt).scale(self.lambda);
            let blend = (1.0 - self.lambda) * y + self.lambda * t;
            grad.data_mut()[r] = (o - S::from_f64(blend)).scale(2.0);
        }
        (total, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn squared_error_examples() {
        assert_eq!(squared_error_sum(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let once = squared_error_sum(&[0.5, -1.0], &[1.0, 2.0]).unwrap();
        let twice = squared_error_sum(&[0.5, -1.0, 0.5, -1.0], &[1.0, 2.0, 1.0, 2.0]).unwrap();
        assert_eq!(twice, 2.0 * once);
    }

    #[test]
    fn uniform_classifier_cross_entropy() {
        let probs = Matrix::from_fn(3, 5, |_, _| 0.2);
        let ce = cross_entropy_sum(&probs, &[0, 3, 4]).unwrap();
        assert!((ce - 3.0 * 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn st_output_examples() {
        assert!((st_regression_loss(&[0.0], &[1.0], &[0.5], 0.5).unwrap() - 0.625).abs() < 1e-15);
        let pred = [0.3, -0.2];
        let teacher = [0.3, -0.2];
        assert_eq!(st_regression_loss(&pred, &[5.0, 5.0], &teacher, 1.0).unwrap(), 0.0);
        let plain = squared_error_sum(&pred, &[1.0, 0.0]).unwrap();
        assert_eq!(st_regression_loss(&pred, &[1.0, 0.0], &[9.0, 9.0], 0.0).unwrap(), plain);
        assert!(st_regression_loss(&pred, &[1.0, 0.0], &teacher, 1.5).is_err());
    }

    #[test]
    fn st_classification_reduces_to_ce_and_kl() {
        let probs = Matrix::from_rows(&[[0.7, 0.2, 0.1], [0.1, 0.1, 0.8]]).unwrap();
        let teacher = Matrix::from_rows(&[[0.6, 0.3, 0.1], [0.2, 0.2, 0.6]]).unwrap();
        let ce = cross_entropy_sum(&probs, &[0, 2]).unwrap();
        assert!((st_classification_loss(&probs, &[0, 2], &teacher, 0.0).unwrap() - ce).abs() < 1e-15);
        assert_eq!(st_classification_loss(&probs, &[0, 2], &probs, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn param_matching_examples() {
        assert_eq!(st_loss_param(&[2.0], &[0.0], 0.0, 1.0).unwrap(), 4.0);
        assert_eq!(st_loss_param(&[1.0, 2.0], &[1.0, 2.0], 0.3, 0.8).unwrap(), 0.3);
        assert_eq!(st_loss_param(&[1.0, 2.0], &[5.0, 2.0], 0.3, 0.0).unwrap(), 0.3);
        assert!(matches!(st_loss_param(&[1.0], &[1.0, 2.0], 0.0, 0.5), Err(Error::Config(_))));
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let (p, q) = ([0.9, 0.1], [0.5, 0.5]);
        assert!(kl_divergence(&p, &q).unwrap() != kl_divergence(&q, &p).unwrap());
        assert!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap().is_finite());
        assert!(matches!(kl_divergence(&[1.0], &[0.5, 0.5]), Err(Error::Shape(_))));
    }

    #[test]
    fn blended_loss_matches_value_form() {
        let out = Matrix::column(&[0.1, -0.7, 2.0]);
        let (y, t) = ([1.0, 0.0, 1.5], [0.5, -1.0, 2.5]);
        let loss = BlendedSquaredError::new(&y, &t, 0.3).unwrap();
        let (v, g) = loss.evaluate(&out);
        assert!((v - st_regression_loss(out.data(), &y, &t, 0.3).unwrap()).abs() < 1e-15);
        let h = 1e-6;
        for r in 0..3 {
            let mut plus = out.clone();
            plus.data_mut()[r] += h;
            let mut minus = out.clone();
            minus.data_mut()[r] -= h;
            let fd = (loss.evaluate(&plus).0 - loss.evaluate(&minus).0) / (2.0 * h);
            assert!((fd - g.data()[r]).abs() < 1e-7);
        }
    }

    fn distribution(raw: &[f64]) -> Vec<f64> {
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative_and_zero_on_identity(
            a in proptest::collection::vec(0.001f64..1.0, 5),
            b in proptest::collection::vec(0.001f64..1.0, 5),
        ) {
            let (p, q) = (distribution(&a), distribution(&b));
            prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
            prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-15);
        }

        #[test]
        fn st_regression_is_nonnegative(
            g in -10.0f64..10.0, y in -10.0f64..10.0, t in -10.0f64..10.0, lambda in 0.0f64..=1.0,
        ) {
            prop_assert!(st_regression_loss(&[g], &[y], &[t], lambda).unwrap() >= 0.0);
        }
    }
}
