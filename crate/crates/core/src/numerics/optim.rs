use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Gradient, MlpModel};

/// Piecewise-constant multiplier schedule keyed on the number of episodes seen.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub milestones: Vec<(u64, f64)>,
}

impl LrSchedule {
    pub fn constant() -> Self {
        LrSchedule::default()
    }

    /// `×factor` after each of the given episode counts.
    pub fn step_decay(at: &[u64], factor: f64) -> Self {
        LrSchedule {
            milestones: at.iter().map(|&e| (e, factor)).collect(),
        }
    }

    pub fn multiplier(&self, episodes_seen: u64) -> f64 {
        self.milestones
            .iter()
            .filter(|(e, _)| *e <= episodes_seen)
            .map(|(_, m)| m)
            .product()
    }
}

/// SGD with momentum, coupled weight decay and a step schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<f64>,
    pub schedule: LrSchedule,
    pub episodes_seen: u64,
    /// Optional max-norm clipping applied to the raw gradient.
    pub max_grad_norm: Option<f64>,
}

impl OptimizerState {
    pub fn new(num_params: usize, learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay must be >= 0, got {weight_decay}")));
        }
        Ok(OptimizerState {
            learning_rate,
            momentum,
            weight_decay,
            velocity: vec![0.0; num_params],
            schedule: LrSchedule::constant(),
            episodes_seen: 0,
            max_grad_norm: None,
        })
    }

    pub fn with_schedule(mut self, schedule: LrSchedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn with_max_grad_norm(mut self, max_norm: Option<f64>) -> Self {
        self.max_grad_norm = max_norm;
        self
    }

    pub fn effective_lr(&self) -> f64 {
        self.learning_rate * self.schedule.multiplier(self.episodes_seen)
    }

    /// Records one meta-update (one episode batch).
    pub fn advance(&mut self) {
        self.episodes_seen += 1;
    }
}

/// `v ← μ v + g + λ θ`, `θ ← θ − lr_eff v`.
///
/// A non-finite gradient leaves both model and state untouched.
pub fn sgd_step(model: &mut MlpModel, grad: &Gradient, state: &mut OptimizerState) -> Result<()> {
    if grad.len() != model.num_params() || state.velocity.len() != model.num_params() {
        return Err(Error::Shape(format!(
            "gradient ({}), velocity ({}) and parameters ({}) must align",
            grad.len(),
            state.velocity.len(),
            model.num_params()
        )));
    }
    if let Some(i) = grad.values.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical {
            layer: model.layer_of_param(i),
            detail: "rejected update with non-finite gradient".into(),
        });
    }
    let clip = match state.max_grad_norm {
        Some(max) if max > 0.0 => {
            let n = grad.norm();
            if n > max {
                max / n
            } else {
                1.0
            }
        }
        _ => 1.0,
    };
    let lr = state.effective_lr();
    let (mu, wd) = (state.momentum, state.weight_decay);
    for ((p, v), g) in model
        .flat_mut()
        .iter_mut()
        .zip(state.velocity.iter_mut())
        .zip(&grad.values)
    {
        *v = mu * *v + clip * g + wd * *p;
        *p -= lr * *v;
    }
    Ok(())
}
