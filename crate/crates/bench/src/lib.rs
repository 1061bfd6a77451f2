//! Shared fixtures for the criterion benches.

use metaproto::harness::{RunConfig, Study};
use metaproto::protocols::Algorithm;
use metaproto::tasks::{gen_gaussian_dataset, sample_episode, sample_sinusoid_task, SinusoidConfig};
use metaproto::util::rng;
use metaproto::{Activation, Episode, GaussianDataset, Matrix, MlpModel, SinusoidTask, Split};

/// The sinusoid network, `[1, 64, 64, 100, 1]` with ReLU.
pub fn sine_model() -> MlpModel {
    MlpModel::init_fan_in(&[1, 64, 64, 100, 1], Activation::Relu, 1).expect("valid dims")
}

/// The Gaussian embedding trunk.
pub fn gauss_trunk() -> MlpModel {
    let cfg = RunConfig::new(Study::Gaussian, Algorithm::Protonet);
    MlpModel::init(&cfg.gaussian.pretrain.trunk_dims, 1).expect("valid dims")
}

pub fn sine_task(seed: u64) -> SinusoidTask {
    sample_sinusoid_task(&mut rng(seed), &SinusoidConfig::default(), true)
}

pub fn gauss_episode(seed: u64) -> (GaussianDataset, Episode) {
    let cfg = RunConfig::new(Study::Gaussian, Algorithm::Protonet);
    let ds = gen_gaussian_dataset(seed, &cfg.gaussian.data).expect("dataset");
    let g = &cfg.gaussian;
    let ep = sample_episode(&ds, Split::MetaTrain, g.n_way, g.shot, g.queries_per_class, &mut rng(seed + 1))
        .expect("episode");
    (ds, ep)
}

/// `rows` evenly spaced inputs on the sinusoid domain.
pub fn sine_inputs(rows: usize) -> Matrix {
    Matrix::from_fn(rows, 1, |r, _| -5.0 + 10.0 * r as f64 / rows.max(1) as f64)
}
