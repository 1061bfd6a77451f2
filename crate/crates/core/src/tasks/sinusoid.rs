use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::util;

pub const BANK_VERSION: u32 = 1;

/// Sampling ranges and instance counts for sinusoid tasks `a·sin(b·x − c)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinusoidConfig {
    pub amplitude: (f64, f64),
    pub frequency: (f64, f64),
    pub phase: (f64, f64),
    pub x_range: (f64, f64),
    pub support: usize,
    pub query: usize,
    /// Standard deviation of the additive label noise.
    pub noise_std: f64,
}

impl Default for SinusoidConfig {
    fn default() -> Self {
        SinusoidConfig {
            amplitude: (0.1, 5.0),
            frequency: (0.5, 2.0),
            phase: (0.5, 2.0 * PI),
            x_range: (-5.0, 5.0),
            support: 10,
            query: 30,
            noise_std: 0.5,
        }
    }
}

/// One labelled instance. `noise` is the realised label noise, so
/// `y - a·sin(b·x - c) == noise` holds exactly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinePoint {
    pub x: f64,
    pub y: f64,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinusoidTask {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub support: Vec<SinePoint>,
    pub query: Vec<SinePoint>,
}

impl SinusoidTask {
    /// The noiseless curve at `x`.
    #[inline]
    pub fn curve(&self, x: f64) -> f64 {
        self.a * (self.b * x - self.c).sin()
    }

    pub fn support_inputs(&self) -> Matrix {
        Matrix::column(&self.support.iter().map(|p| p.x).collect::<Vec<_>>())
    }

    pub fn query_inputs(&self) -> Matrix {
        Matrix::column(&self.query.iter().map(|p| p.x).collect::<Vec<_>>())
    }

    pub fn support_labels(&self) -> Vec<f64> {
        self.support.iter().map(|p| p.y).collect()
    }

    pub fn query_labels(&self) -> Vec<f64> {
        self.query.iter().map(|p| p.y).collect()
    }
}

fn draw_point<R: Rng>(rng: &mut R, cfg: &SinusoidConfig, noise: &Normal<f64>, task: &SinusoidTask) -> SinePoint {
    let x = rng.random_range(cfg.x_range.0..=cfg.x_range.1);
    let clean = task.curve(x);
    let y = clean + noise.sample(rng);
    SinePoint {
        x,
        y,
        noise: y - clean,
    }
}

/// Draws `(a, b, c)` uniformly from their ranges, then the support set and,
/// when requested, the query set.
pub fn sample_sinusoid_task<R: Rng>(rng: &mut R, cfg: &SinusoidConfig, with_query: bool) -> SinusoidTask {
    let noise = Normal::new(0.0, cfg.noise_std).expect("noise std is finite and non-negative");
    let mut task = SinusoidTask {
        a: rng.random_range(cfg.amplitude.0..=cfg.amplitude.1),
        b: rng.random_range(cfg.frequency.0..=cfg.frequency.1),
        c: rng.random_range(cfg.phase.0..=cfg.phase.1),
        support: Vec::with_capacity(cfg.support),
        query: Vec::new(),
    };
    for _ in 0..cfg.support {
        let p = draw_point(rng, cfg, &noise, &task);
        task.support.push(p);
    }
    if with_query {
        for _ in 0..cfg.query {
            let p = draw_point(rng, cfg, &noise, &task);
            task.query.push(p);
        }
    }
    task
}

/// Seeded train / validation / test task banks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinusoidBank {
    pub version: u32,
    pub seed: u64,
    pub config: SinusoidConfig,
    pub train: Vec<SinusoidTask>,
    pub val: Vec<SinusoidTask>,
    pub test: Vec<SinusoidTask>,
}

impl SinusoidBank {
    /// Each split uses its own rng stream, so changing one count leaves the
    /// other splits unchanged. Every task carries a query set; protocols that
    /// do not need it simply ignore it.
    pub fn generate(seed: u64, cfg: &SinusoidConfig, train: usize, val: usize, test: usize) -> Result<Self> {
        if cfg.support == 0 {
            return Err(Error::Config("sinusoid tasks need at least one support point".into()));
        }
        if !(cfg.noise_std >= 0.0) {
            return Err(Error::Config(format!("noise std must be >= 0, got {}", cfg.noise_std)));
        }
        let split = |stream: u64, n: usize| {
            let mut rng = util::rng(util::derive_seed(seed, stream));
            (0..n).map(|_| sample_sinusoid_task(&mut rng, cfg, true)).collect::<Vec<_>>()
        };
        Ok(SinusoidBank {
            version: BANK_VERSION,
            seed,
            config: cfg.clone(),
            train: split(1, train),
            val: split(2, val),
            test: split(3, test),
        })
    }
}
