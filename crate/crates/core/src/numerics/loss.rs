use super::{Matrix, Scalar};

/// A differentiable scalar function of a batch of network outputs.
///
/// Implementations return the loss value and its gradient with respect to every
/// output entry. They are generic over [`Scalar`] so that the same loss can be
/// evaluated on dual numbers for Hessian-vector products.
pub trait OutputLoss {
    fn evaluate<S: Scalar>(&self, outputs: &Matrix<S>) -> (S, Matrix<S>);
}

/// A loss that ignores the outputs entirely.
#[derive(Clone, Copy, Debug)]
pub struct ConstantLoss(pub f64);

impl OutputLoss for ConstantLoss {
    fn evaluate<S: Scalar>(&self, outputs: &Matrix<S>) -> (S, Matrix<S>) {
        (S::from_f64(self.0), Matrix::zeros(outputs.rows(), outputs.cols()))
    }
}

/// `sum over entries of (output - target)^2`.
#[derive(Clone, Debug)]
pub struct SquaredError {
    targets: Matrix,
}

impl SquaredError {
    pub fn new(targets: Matrix) -> Self {
        SquaredError { targets }
    }
}

impl OutputLoss for SquaredError {
    fn evaluate<S: Scalar>(&self, outputs: &Matrix<S>) -> (S, Matrix<S>) {
        let mut total = S::zero();
        let mut grad = Matrix::zeros(outputs.rows(), outputs.cols());
        for ((g, &o), &t) in grad
            .data_mut()
            .iter_mut()
            .zip(outputs.data())
            .zip(self.targets.data())
        {
            let r = o - S::from_f64(t);
            total += r * r;
            *g = r.scale(2.0);
        }
        (total, grad)
    }
}

/// Numerically stable `log softmax` of one row.
pub(crate) fn log_softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let max = logits
        .iter()
        .copied()
        .fold(None::<S>, |m, v| match m {
            Some(m) if m.value() >= v.value() => Some(m),
            _ => Some(v),
        })
        .unwrap_or_else(S::zero);
    let mut sum = S::zero();
    for &z in logits {
        sum += (z - max).exp();
    }
    let lse = max + sum.ln();
    logits.iter().map(|&z| z - lse).collect()
}

/// Cross-entropy of softmax(logits) against per-row target distributions,
/// `sum_rows sum_k -q_k log p_k`, plus a constant offset.
///
/// With one-hot targets this is the usual classification loss; with a teacher
/// distribution `T` and offset `sum T ln T` it is exactly `KL(T || softmax)`.
#[derive(Clone, Debug)]
pub struct SoftTargetCrossEntropy {
    targets: Matrix,
    offset: f64,
}

impl SoftTargetCrossEntropy {
    pub fn new(targets: Matrix, offset: f64) -> Self {
        SoftTargetCrossEntropy { targets, offset }
    }

    pub fn hard(labels: &[usize], classes: usize) -> Self {
        let targets = Matrix::from_fn(labels.len(), classes, |r, c| {
            if labels[r] == c {
                1.0
            } else {
                0.0
            }
        });
        SoftTargetCrossEntropy { targets, offset: 0.0 }
    }

    /// `sum_rows KL(target_row || softmax(logit_row))`.
    pub fn kl(targets: Matrix) -> Self {
        let offset = targets
            .data()
            .iter()
            .filter(|&&t| t > 0.0)
            .map(|&t| t * t.ln())
            .sum();
        SoftTargetCrossEntropy { targets, offset }
    }
}

impl OutputLoss for SoftTargetCrossEntropy {
    fn evaluate<S: Scalar>(&self, outputs: &Matrix<S>) -> (S, Matrix<S>) {
        let mut total = S::from_f64(self.offset);
        let mut grad = Matrix::zeros(outputs.rows(), outputs.cols());
        for r in 0..outputs.rows() {
            let logp = log_softmax(outputs.row(r));
            let q = self.targets.row(r);
            let mass: f64 = q.iter().sum();
            let g = grad.row_mut(r);
            for k in 0..logp.len() {
                if q[k] != 0.0 {
                    total -= logp[k].scale(q[k]);
                }
                g[k] = logp[k].exp().scale(mass) - S::from_f64(q[k]);
            }
        }
        (total, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_n() {
        let loss = SoftTargetCrossEntropy::hard(&[2], 5);
        let (v, _) = loss.evaluate(&Matrix::<f64>::zeros(1, 5));
        assert!((v - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_to_itself_is_zero() {
        let logits = Matrix::from_rows(&[[0.3, -1.0, 2.0]]).unwrap();
        let logp = log_softmax(logits.row(0));
        let p: Vec<f64> = logp.iter().map(|v| v.exp()).collect();
        let loss = SoftTargetCrossEntropy::kl(Matrix::from_rows(&[p]).unwrap());
        let (v, g) = loss.evaluate(&logits);
        assert!(v.abs() < 1e-12);
        assert!(g.data().iter().all(|x| x.abs() < 1e-12));
    }
}
