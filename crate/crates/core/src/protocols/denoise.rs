//! The label-denoising inequality for the blended regression loss:
//! `(1−λ)(g−y)² + λ(g−(y−ε))² ≥ (g−(y−λε))²`, with gap `λ(1−λ)ε²`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::losses::check_lambda;
use crate::error::Result;
use crate::util::rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenoiseCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    /// λ ∈ {0, 1} or ε = 0, where both sides agree analytically.
    pub equality_case: bool,
}

pub fn denoise_bound_check(g: f64, y: f64, epsilon: f64, lambda: f64) -> Result<DenoiseCheck> {
    check_lambda(lambda)?;
    let target = y - epsilon;
    let lhs = (1.0 - lambda) * (g - y) * (g - y) + lambda * (g - target) * (g - target);
    let clean = y - lambda * epsilon;
    let rhs = (g - clean) * (g - clean);
    Ok(DenoiseCheck {
        lhs,
        rhs,
        holds: lhs >= rhs - 1e-12,
        equality_case: lambda == 0.0 || lambda == 1.0 || epsilon == 0.0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiseReport {
    pub samples: u64,
    pub seed: u64,
    pub violations: u64,
    /// Largest `rhs − lhs` observed (negative when the bound always held strictly).
    pub max_violation: f64,
    /// Largest `|lhs − rhs|` at λ ∈ {0, 1} or ε = 0.
    pub max_equality_deviation: f64,
    /// Largest `|(lhs − rhs) − λ(1−λ)ε²|`.
    pub max_gap_deviation: f64,
}

impl DenoiseReport {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.max_equality_deviation <= 1e-12 && self.max_gap_deviation < 1e-9
    }
}

/// Random quadruples with `g, y ∈ [−5, 5]`, `ε ∈ [−2, 2]`, `λ ∈ [0, 1]`. Every
/// eighth sample is pinned to an equality case so that those are exercised too.
pub fn run_denoise_check(samples: u64, seed: u64) -> Result<DenoiseReport> {
    let mut r = rng(seed);
    let mut report = DenoiseReport {
        samples,
        seed,
        violations: 0,
        max_violation: f64::NEG_INFINITY,
        max_equality_deviation: 0.0,
        max_gap_deviation: 0.0,
    };
    for i in 0..samples {
        let g = r.random_range(-5.0..=5.0);
        let y = r.random_range(-5.0..=5.0);
        let mut eps = r.random_range(-2.0..=2.0);
        let mut lambda: f64 = r.random_range(0.0..=1.0);
        match i % 8 {
            5 => lambda = 0.0,
            6 => lambda = 1.0,
            7 => eps = 0.0,
            _ => {}
        }
        let c = denoise_bound_check(g, y, eps, lambda)?;
        if !c.holds {
            report.violations += 1;
        }
        report.max_violation = report.max_violation.max(c.rhs - c.lhs);
        if c.equality_case {
            report.max_equality_deviation = report.max_equality_deviation.max((c.lhs - c.rhs).abs());
        }
        let gap = lambda * (1.0 - lambda) * eps * eps;
        report.max_gap_deviation = report.max_gap_deviation.max(((c.lhs - c.rhs) - gap).abs());
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let c = denoise_bound_check(0.0, 1.0, 1.0, 0.5).unwrap();
        assert_eq!((c.lhs, c.rhs, c.holds), (0.5, 0.25, true));
        assert!((c.lhs - c.rhs - 0.25).abs() < 1e-15);
    }

    #[test]
    fn endpoints_are_equalities() {
        for &(g, y, e) in &[(0.3, -1.2, 0.7), (2.0, 2.0, -1.0), (-4.0, 1.0, 1.5)] {
            for lambda in [0.0, 1.0] {
                let c = denoise_bound_check(g, y, e, lambda).unwrap();
                assert!(c.equality_case && (c.lhs - c.rhs).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn random_report_is_clean() {
        let rep = run_denoise_check(20_000, 3).unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn lambda_out_of_range_is_rejected() {
        assert!(denoise_bound_check(0.0, 0.0, 0.0, -0.1).is_err());
    }
}
