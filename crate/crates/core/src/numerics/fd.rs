//! Central-difference gradient oracle. Only the test suites rely on it.

use crate::error::{Error, Result};

use super::{Gradient, Matrix, MlpModel, OutputLoss};

/// Central differences of `f` around `params`, one coordinate at a time.
pub fn finite_diff<F>(params: &[f64], mut f: F, step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let mut x = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(&x)?;
        x[i] = orig - step;
        let minus = f(&x)?;
        x[i] = orig;
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// Finite-difference counterpart of [`super::backprop`].
pub fn finite_diff_grad<L: OutputLoss>(
    model: &MlpModel,
    inputs: &Matrix,
    loss: &L,
    step: f64,
) -> Result<Gradient> {
    let eval = |p: &[f64]| -> Result<f64> {
        let m = model.with_params(p.to_vec())?;
        Ok(loss.evaluate(&m.forward(inputs)?).0)
    };
    let value = eval(model.flat())?;
    let values = finite_diff(model.flat(), eval, step)?;
    Ok(Gradient { values, loss: value })
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vectors vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
