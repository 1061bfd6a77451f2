use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util;

use super::scalar::{axpy, dot};
use super::{Dual, Matrix, OutputLoss, Scalar};

/// Nonlinearity applied to every hidden layer. The output layer is always linear.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply<S: Scalar>(self, v: S) -> S {
        match self {
            Activation::Relu => {
                if v.value() > 0.0 {
                    v
                } else {
                    S::zero()
                }
            }
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    /// Multiplies `delta` by the activation derivative, expressed through the
    /// post-activation value `out`.
    #[inline]
    fn backprop<S: Scalar>(self, delta: S, out: S) -> S {
        match self {
            Activation::Relu => {
                if out.value() > 0.0 {
                    delta
                } else {
                    S::zero()
                }
            }
            Activation::Tanh => delta * (S::one() - out * out),
            Activation::Identity => delta,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerSpan {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Offset of the `fan_out x fan_in` weight block.
    pub w: usize,
    /// Offset of the bias vector.
    pub b: usize,
}

pub(crate) fn spans(dims: &[usize]) -> Vec<LayerSpan> {
    let mut out = Vec::with_capacity(dims.len().saturating_sub(1));
    let mut offset = 0;
    for pair in dims.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let w = offset;
        let b = w + fan_in * fan_out;
        offset = b + fan_out;
        out.push(LayerSpan {
            fan_in,
            fan_out,
            w,
            b,
        });
    }
    out
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::Config(format!(
            "an MLP needs at least an input and an output dimension, got {dims:?}"
        )));
    }
    if dims.contains(&0) {
        return Err(Error::Config(format!("layer dimensions must be positive: {dims:?}")));
    }
    Ok(())
}

/// Returns the post-activation value of every layer, input first.
pub(crate) fn forward_pass<S: Scalar>(
    dims: &[usize],
    act: Activation,
    params: &[S],
    input: &Matrix<S>,
) -> Vec<Matrix<S>> {
    let spans = spans(dims);
    let last = spans.len() - 1;
    let mut trace = Vec::with_capacity(spans.len() + 1);
    trace.push(input.clone());
    for (l, span) in spans.iter().enumerate() {
        let x = &trace[l];
        let mut out = Matrix::<S>::zeros(x.rows(), span.fan_out);
        let bias = &params[span.b..span.b + span.fan_out];
        for r in 0..x.rows() {
            let xr = x.row(r);
            let o = out.row_mut(r);
            for j in 0..span.fan_out {
                let w = &params[span.w + j * span.fan_in..span.w + (j + 1) * span.fan_in];
                let z = bias[j] + dot(w, xr);
                o[j] = if l == last { z } else { act.apply(z) };
            }
        }
        trace.push(out);
    }
    trace
}

/// Reverse pass. `d_out` is the loss gradient with respect to the network
/// output. Returns the flat parameter gradient and, when requested, the
/// gradient with respect to the inputs.
pub(crate) fn backward_pass<S: Scalar>(
    dims: &[usize],
    act: Activation,
    params: &[S],
    trace: &[Matrix<S>],
    d_out: Matrix<S>,
    input_grad: bool,
) -> (Vec<S>, Option<Matrix<S>>) {
    let spans = spans(dims);
    let last = spans.len() - 1;
    let mut grad = vec![S::zero(); params.len()];
    let mut delta = d_out;
    for l in (0..spans.len()).rev() {
        let span = spans[l];
        if l < last {
            let out = &trace[l + 1];
            for (d, &o) in delta.data_mut().iter_mut().zip(out.data()) {
                *d = act.backprop(*d, o);
            }
        }
        let a = &trace[l];
        {
            let (gw, gb) = grad[span.w..span.b + span.fan_out].split_at_mut(span.b - span.w);
            for r in 0..a.rows() {
                let ar = a.row(r);
                let dr = delta.row(r);
                for j in 0..span.fan_out {
                    let d = dr[j];
                    if d.is_zero() {
                        continue;
                    }
                    axpy(&mut gw[j * span.fan_in..(j + 1) * span.fan_in], d, ar);
                    gb[j] += d;
                }
            }
        }
        if l > 0 || input_grad {
            let mut d_in = Matrix::<S>::zeros(a.rows(), span.fan_in);
            for r in 0..a.rows() {
                let dr = delta.row(r);
                let di = d_in.row_mut(r);
                for j in 0..span.fan_out {
                    let d = dr[j];
                    if d.is_zero() {
                        continue;
                    }
                    axpy(
                        di,
                        d,
                        &params[span.w + j * span.fan_in..span.w + (j + 1) * span.fan_in],
                    );
                }
            }
            delta = d_in;
        }
    }
    let d_in = if input_grad { Some(delta) } else { None };
    (grad, d_in)
}

/// Dense feed-forward network. Parameters are stored flat, layer by layer,
/// as a row-major `out x in` weight block followed by the bias vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

impl MlpModel {
    /// Rectifier network with fan-in-scaled uniform weights and zero biases.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        Self::init_with(layer_dims, Activation::Relu, seed)
    }

    /// Weights of a layer followed by a rectifier are drawn from
    /// `U(-sqrt(6/fan_in), sqrt(6/fan_in))`; all other layers use
    /// `U(-sqrt(3/fan_in), sqrt(3/fan_in))`. Biases start at zero.
    pub fn init_with(layer_dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        validate_dims(layer_dims)?;
        let mut rng = util::rng(seed);
        let spans = spans(layer_dims);
        let last = spans.len() - 1;
        let mut params = vec![0.0; param_count(layer_dims)];
        for (l, span) in spans.iter().enumerate() {
            let gain = if l < last && activation == Activation::Relu {
                6.0
            } else {
                3.0
            };
            let bound = (gain / span.fan_in as f64).sqrt();
            for w in &mut params[span.w..span.b] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(MlpModel {
            layer_dims: layer_dims.to_vec(),
            activation,
            params,
        })
    }

    /// Weights and biases drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
    /// the usual default for linear layers. Much flatter than [`init_with`]:
    /// a single inner step of size 0.01 on a sum loss stays stable.
    ///
    /// [`init_with`]: MlpModel::init_with
    pub fn init_fan_in(layer_dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        validate_dims(layer_dims)?;
        let mut rng = util::rng(seed);
        let mut params = vec![0.0; param_count(layer_dims)];
        for span in spans(layer_dims) {
            let bound = 1.0 / (span.fan_in as f64).sqrt();
            for p in &mut params[span.w..span.b + span.fan_out] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(MlpModel {
            layer_dims: layer_dims.to_vec(),
            activation,
            params,
        })
    }

    pub fn zeros(layer_dims: &[usize], activation: Activation) -> Result<Self> {
        validate_dims(layer_dims)?;
        Ok(MlpModel {
            layer_dims: layer_dims.to_vec(),
            activation,
            params: vec![0.0; param_count(layer_dims)],
        })
    }

    pub fn from_flat(layer_dims: &[usize], activation: Activation, params: Vec<f64>) -> Result<Self> {
        validate_dims(layer_dims)?;
        let expected = param_count(layer_dims);
        if params.len() != expected {
            return Err(Error::Shape(format!(
                "{} parameters given, dims {layer_dims:?} need {expected}",
                params.len()
            )));
        }
        Ok(MlpModel {
            layer_dims: layer_dims.to_vec(),
            activation,
            params,
        })
    }

    /// Same architecture, new parameter vector.
    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        Self::from_flat(&self.layer_dims, self.activation, params)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated dims")
    }

    pub fn flat(&self) -> &[f64] {
        &self.params
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.params
    }

    /// Row-major `out x in` weights of layer `l`.
    pub fn weights(&self, l: usize) -> &[f64] {
        let s = spans(&self.layer_dims)[l];
        &self.params[s.w..s.b]
    }

    pub fn weights_mut(&mut self, l: usize) -> &mut [f64] {
        let s = spans(&self.layer_dims)[l];
        &mut self.params[s.w..s.b]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        let s = spans(&self.layer_dims)[l];
        &self.params[s.b..s.b + s.fan_out]
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        let s = spans(&self.layer_dims)[l];
        &mut self.params[s.b..s.b + s.fan_out]
    }

    /// Layer that owns flat parameter index `i`.
    pub fn layer_of_param(&self, i: usize) -> usize {
        spans(&self.layer_dims)
            .iter()
            .position(|s| i < s.b + s.fan_out)
            .unwrap_or(self.num_layers() - 1)
    }

    /// A single-layer linear map keeping only the given output rows.
    /// Only meaningful for one-layer models (heads).
    pub fn select_outputs(&self, rows: &[usize]) -> Result<MlpModel> {
        if self.num_layers() != 1 {
            return Err(Error::Shape("row selection needs a single-layer model".into()));
        }
        let fan_in = self.input_dim();
        let mut params = Vec::with_capacity(rows.len() * (fan_in + 1));
        for &r in rows {
            if r >= self.output_dim() {
                return Err(Error::Index(format!(
                    "output row {r} out of range for {} outputs",
                    self.output_dim()
                )));
            }
            params.extend_from_slice(&self.weights(0)[r * fan_in..(r + 1) * fan_in]);
        }
        for &r in rows {
            params.push(self.bias(0)[r]);
        }
        MlpModel::from_flat(&[fan_in, rows.len()], self.activation, params)
    }

    fn check_input(&self, inputs: &Matrix) -> Result<()> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} columns, model expects {}",
                inputs.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub(crate) fn trace(&self, inputs: &Matrix) -> Result<Vec<Matrix>> {
        self.check_input(inputs)?;
        let trace = forward_pass(&self.layer_dims, self.activation, &self.params, inputs);
        for (l, m) in trace.iter().enumerate().skip(1) {
            if !m.is_finite() {
                return Err(Error::Numerical {
                    layer: l - 1,
                    detail: "forward activation".into(),
                });
            }
        }
        Ok(trace)
    }

    /// Batch forward pass; one output row per input row.
    pub fn forward(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(self.trace(inputs)?.pop().expect("non-empty trace"))
    }

    fn check_grad(&self, grad: &[f64]) -> Result<()> {
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerical {
                layer: self.layer_of_param(i),
                detail: "gradient".into(),
            });
        }
        Ok(())
    }
}

/// Flat parameter gradient paired with the loss it was taken from.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub values: Vec<f64>,
    pub loss: f64,
}

impl Gradient {
    pub fn zeros(len: usize) -> Self {
        Gradient {
            values: vec![0.0; len],
            loss: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Adds `other` into `self`, loss included.
    pub fn accumulate(&mut self, other: &Gradient) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Shape(format!(
                "gradient lengths {} and {} differ",
                self.len(),
                other.len()
            )));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        self.loss += other.loss;
        Ok(())
    }
}

/// Reverse-mode gradient of `loss(model(inputs))` with respect to every parameter.
pub fn backprop<L: OutputLoss + ?Sized>(
    model: &MlpModel,
    inputs: &Matrix,
    loss: &L,
) -> Result<Gradient> {
    let trace = model.trace(inputs)?;
    let (value, d_out) = loss.evaluate(trace.last().expect("non-empty trace"));
    if !value.is_finite() || !d_out.is_finite() {
        return Err(Error::Numerical {
            layer: model.num_layers() - 1,
            detail: format!("loss evaluated to {value}"),
        });
    }
    let (values, _) = backward_pass(
        &model.layer_dims,
        model.activation,
        &model.params,
        &trace,
        d_out,
        false,
    );
    model.check_grad(&values)?;
    Ok(Gradient { values, loss: value })
}

/// Parameter and input gradients for an externally supplied output gradient.
/// Used to chain networks (trunk followed by a head).
pub fn backprop_with_input_grad(
    model: &MlpModel,
    inputs: &Matrix,
    d_out: Matrix,
) -> Result<(Vec<f64>, Matrix)> {
    let trace = model.trace(inputs)?;
    if d_out.rows() != inputs.rows() || d_out.cols() != model.output_dim() {
        return Err(Error::Shape(format!(
            "output gradient is {}x{}, expected {}x{}",
            d_out.rows(),
            d_out.cols(),
            inputs.rows(),
            model.output_dim()
        )));
    }
    let (grad, d_in) = backward_pass(
        &model.layer_dims,
        model.activation,
        &model.params,
        &trace,
        d_out,
        true,
    );
    model.check_grad(&grad)?;
    Ok((grad, d_in.expect("input gradient requested")))
}

/// Exact Hessian-vector product `H v` of `loss(model(inputs))`, computed by
/// running the reverse pass on dual numbers seeded with `v`.
pub fn hessian_vector_product<L: OutputLoss + ?Sized>(
    model: &MlpModel,
    inputs: &Matrix,
    loss: &L,
    v: &[f64],
) -> Result<Vec<f64>> {
    model.check_input(inputs)?;
    if v.len() != model.num_params() {
        return Err(Error::Shape(format!(
            "direction has {} entries, model has {} parameters",
            v.len(),
            model.num_params()
        )));
    }
    let params: Vec<Dual> = model
        .params
        .iter()
        .zip(v)
        .map(|(&p, &t)| Dual::new(p, t))
        .collect();
    let x = inputs.map(Dual::from_f64);
    let trace = forward_pass(&model.layer_dims, model.activation, &params, &x);
    let (_, d_out) = loss.evaluate(trace.last().expect("non-empty trace"));
    let (grad, _) = backward_pass(&model.layer_dims, model.activation, &params, &trace, d_out, false);
    let hv: Vec<f64> = grad.iter().map(|g| g.eps).collect();
    model.check_grad(&hv)?;
    Ok(hv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{ConstantLoss, SquaredError};

    #[test]
    fn parameter_counts() {
        let sin = MlpModel::init(&[1, 64, 64, 100], 7).unwrap();
        assert_eq!(sin.num_params(), (64 + 64) + (64 * 64 + 64) + (64 * 100 + 100));
        let gau = MlpModel::init(&[2, 64, 64, 100], 7).unwrap();
        assert_eq!(gau.num_params(), (2 * 64 + 64) + (64 * 64 + 64) + (64 * 100 + 100));
    }

    #[test]
    fn init_is_deterministic_and_biases_zero() {
        let a = MlpModel::init(&[2, 64, 64, 100], 7).unwrap();
        let b = MlpModel::init(&[2, 64, 64, 100], 7).unwrap();
        assert_eq!(a.flat(), b.flat());
        for l in 0..a.num_layers() {
            assert!(a.bias(l).iter().all(|&v| v == 0.0));
        }
        let c = MlpModel::init(&[2, 64, 64, 100], 8).unwrap();
        assert_ne!(a.flat(), c.flat());
    }

    #[test]
    fn empty_dims_rejected() {
        assert!(matches!(MlpModel::init(&[], 1), Err(Error::Config(_))));
        assert!(matches!(MlpModel::init(&[3], 1), Err(Error::Config(_))));
        assert!(matches!(MlpModel::init(&[3, 0, 1], 1), Err(Error::Config(_))));
    }

    #[test]
    fn zero_model_outputs_zero() {
        let m = MlpModel::zeros(&[3, 5, 2], Activation::Relu).unwrap();
        let x = Matrix::from_rows(&[[1.0, -2.0, 3.0]]).unwrap();
        assert_eq!(m.forward(&x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn single_linear_layer_is_a_dot_product() {
        let m = MlpModel::from_flat(&[2, 1], Activation::Relu, vec![1.0, 1.0, 0.0]).unwrap();
        let x = Matrix::from_rows(&[[3.0, 4.0]]).unwrap();
        assert_eq!(m.forward(&x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn batch_rows_match_single_calls() {
        let m = MlpModel::init(&[3, 16, 4], 11).unwrap();
        let x = Matrix::from_rows(&[[0.1, 0.2, -0.3], [1.5, -0.5, 2.0]]).unwrap();
        let both = m.forward(&x).unwrap();
        for r in 0..2 {
            let single = m.forward(&x.select_rows(&[r])).unwrap();
            assert_eq!(single.row(0), both.row(r));
        }
    }

    #[test]
    fn dimension_mismatch_is_a_shape_error() {
        let m = MlpModel::init(&[3, 4, 1], 1).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        assert!(matches!(m.forward(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn scalar_quadratic_hand_derivative() {
        let (w, x, y) = (1.5, 2.0, 4.0);
        let m = MlpModel::from_flat(&[1, 1], Activation::Relu, vec![w, 0.0]).unwrap();
        let loss = SquaredError::new(Matrix::column(&[y]));
        let g = backprop(&m, &Matrix::column(&[x]), &loss).unwrap();
        assert_eq!(g.values[0], 2.0 * (w * x - y) * x);
        assert_eq!(g.values[1], 2.0 * (w * x - y));
        assert_eq!(g.loss, (w * x - y).powi(2));
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let m = MlpModel::init(&[2, 8, 3], 4).unwrap();
        let x = Matrix::from_rows(&[[0.3, -0.7]]).unwrap();
        let g = backprop(&m, &x, &ConstantLoss(2.5)).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
        assert_eq!(g.loss, 2.5);
    }

    #[test]
    fn non_finite_forward_reports_layer() {
        let mut m = MlpModel::init(&[1, 4, 1], 3).unwrap();
        m.bias_mut(1)[0] = f64::NAN;
        let err = m.forward(&Matrix::column(&[1.0])).unwrap_err();
        assert!(matches!(err, Error::Numerical { layer: 1, .. }));
    }

    #[test]
    fn head_row_selection() {
        let head = MlpModel::init(&[4, 6], 9).unwrap();
        let sliced = head.select_outputs(&[5, 1]).unwrap();
        let x = Matrix::from_rows(&[[0.5, -1.0, 2.0, 0.25]]).unwrap();
        let full = head.forward(&x).unwrap();
        let part = sliced.forward(&x).unwrap();
        assert_eq!(part.row(0), &[full.get(0, 5), full.get(0, 1)]);
    }
}
