use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{backprop, hessian_vector_product, Gradient, Matrix, MlpModel, OutputLoss};

/// Whether the outer gradient differentiates through the inner update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerOrder {
    /// Exact gradient, Hessian-vector products included.
    #[default]
    Second,
    /// Treats the adapted parameters as constant with respect to the initialization.
    First,
}

/// A loss bound to the inputs it is evaluated on.
pub struct Objective<'a, L> {
    pub inputs: &'a Matrix,
    pub loss: &'a L,
}

impl<'a, L> Objective<'a, L> {
    pub fn new(inputs: &'a Matrix, loss: &'a L) -> Self {
        Objective { inputs, loss }
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(Error::Config(format!("inner step size must be >= 0, got {eta}")));
    }
    Ok(())
}

/// Runs `steps` plain gradient steps of size `eta` on the inner objective and
/// returns the whole trajectory, starting with `model` itself.
pub fn adapt<L: OutputLoss>(
    model: &MlpModel,
    inner: &Objective<'_, L>,
    eta: f64,
    steps: usize,
) -> Result<Vec<MlpModel>> {
    check_eta(eta)?;
    let mut traj = Vec::with_capacity(steps + 1);
    traj.push(model.clone());
    for _ in 0..steps {
        let current = traj.last().expect("trajectory starts non-empty");
        let g = backprop(current, inner.inputs, inner.loss)?;
        let next: Vec<f64> = current
            .flat()
            .iter()
            .zip(&g.values)
            .map(|(p, d)| p - eta * d)
            .collect();
        traj.push(current.with_params(next)?);
    }
    Ok(traj)
}

/// Gradient of `outer(θ_K)` with respect to the initialization `θ_0`, where
/// `θ_{k+1} = θ_k - η ∇inner(θ_k)`.
///
/// The backward sweep applies `v ← v - η H_inner(θ_k) v` for every inner step.
pub fn grad_through_inner_step<Li: OutputLoss, Lo: OutputLoss>(
    model: &MlpModel,
    inner: &Objective<'_, Li>,
    outer: &Objective<'_, Lo>,
    eta: f64,
    steps: usize,
    order: InnerOrder,
) -> Result<Gradient> {
    let traj = adapt(model, inner, eta, steps)?;
    let adapted = traj.last().expect("trajectory starts non-empty");
    let Gradient { mut values, loss } = backprop(adapted, outer.inputs, outer.loss)?;
    if order == InnerOrder::Second && eta > 0.0 {
        for theta in traj[..steps].iter().rev() {
            let hv = hessian_vector_product(theta, inner.inputs, inner.loss, &values)?;
            for (v, h) in values.iter_mut().zip(hv) {
                *v -= eta * h;
            }
        }
    }
    Ok(Gradient { values, loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Activation, SquaredError};

    #[test]
    fn zero_step_size_is_plain_backprop() {
        let m = MlpModel::init(&[1, 8, 1], 5).unwrap();
        let xs = Matrix::column(&[0.5, -1.0]);
        let inner = SquaredError::new(Matrix::column(&[1.0, 2.0]));
        let outer = SquaredError::new(Matrix::column(&[-1.0, 0.0]));
        let g = grad_through_inner_step(
            &m,
            &Objective::new(&xs, &inner),
            &Objective::new(&xs, &outer),
            0.0,
            1,
            InnerOrder::Second,
        )
        .unwrap();
        let plain = backprop(&m, &xs, &outer).unwrap();
        assert_eq!(g, plain);
    }

    #[test]
    fn scalar_chain_rule() {
        // f(w) = (w x - y)^2 inner, (w' u - z)^2 outer, w' = w - η f'(w).
        let (w, x, y, u, z, eta) = (0.7, 1.3, 2.0, -0.4, 0.9, 0.05);
        let m = MlpModel::from_flat(&[1, 1], Activation::Relu, vec![w, 0.0]).unwrap();
        let xi = Matrix::column(&[x]);
        let xo = Matrix::column(&[u]);
        let inner = SquaredError::new(Matrix::column(&[y]));
        let outer = SquaredError::new(Matrix::column(&[z]));
        let g = grad_through_inner_step(
            &m,
            &Objective::new(&xi, &inner),
            &Objective::new(&xo, &outer),
            eta,
            1,
            InnerOrder::Second,
        )
        .unwrap();
        // Two parameters (w, b); the inner gradient w.r.t. (w, b) is
        // 2 r (x, 1) with r = w x + b - y, Hessian 2 [[x², x], [x, 1]].
        let r = w * x - y;
        let wp = w - eta * 2.0 * r * x;
        let bp = -eta * 2.0 * r;
        let ro = wp * u + bp - z;
        let go = [2.0 * ro * u, 2.0 * ro];
        let h = [[2.0 * x * x, 2.0 * x], [2.0 * x, 2.0]];
        let expect_w = go[0] - eta * (h[0][0] * go[0] + h[0][1] * go[1]);
        let expect_b = go[1] - eta * (h[1][0] * go[0] + h[1][1] * go[1]);
        assert!((g.values[0] - expect_w).abs() < 1e-12);
        assert!((g.values[1] - expect_b).abs() < 1e-12);
        assert!((g.loss - ro * ro).abs() < 1e-12);
    }

    #[test]
    fn first_order_is_outer_gradient_at_adapted_point() {
        let m = MlpModel::init(&[1, 6, 1], 2).unwrap();
        let xs = Matrix::column(&[0.1, 0.8, -0.6]);
        let inner = SquaredError::new(Matrix::column(&[0.2, -0.3, 1.0]));
        let outer = SquaredError::new(Matrix::column(&[0.0, 0.5, 0.5]));
        let g = grad_through_inner_step(
            &m,
            &Objective::new(&xs, &inner),
            &Objective::new(&xs, &outer),
            0.1,
            1,
            InnerOrder::First,
        )
        .unwrap();
        let adapted = adapt(&m, &Objective::new(&xs, &inner), 0.1, 1).unwrap().pop().unwrap();
        assert_eq!(g, backprop(&adapted, &xs, &outer).unwrap());
    }

    #[test]
    fn negative_step_rejected() {
        let m = MlpModel::init(&[1, 1], 2).unwrap();
        let xs = Matrix::column(&[0.1]);
        let l = SquaredError::new(Matrix::column(&[0.0]));
        assert!(matches!(
            adapt(&m, &Objective::new(&xs, &l), -0.1, 1),
            Err(Error::Config(_))
        ));
    }
}
