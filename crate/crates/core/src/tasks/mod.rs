//! Synthetic task generators and episode samplers.

mod episode;
mod gaussian;
mod sinusoid;

pub use episode::{sample_biased_episode, sample_episode, Episode, EpisodeLog, EpisodePoint};
pub use gaussian::{
    gen_gaussian_dataset, relative_likelihood, Gaussian2, GaussianClass, GaussianConfig,
    GaussianDataset, Split, DATASET_VERSION,
};
pub use sinusoid::{
    sample_sinusoid_task, SinePoint, SinusoidBank, SinusoidConfig, SinusoidTask, BANK_VERSION,
};
