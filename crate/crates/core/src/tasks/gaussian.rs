use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::util;

pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    MetaTrain,
    MetaVal,
    MetaTest,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::MetaTrain => "meta_train",
            Split::MetaVal => "meta_val",
            Split::MetaTest => "meta_test",
        })
    }
}

/// A 2-d Gaussian with a possibly singular covariance. Densities are taken
/// on the support subspace through the pseudo-inverse.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian2 {
    pub mu: [f64; 2],
    pub sigma: [[f64; 2]; 2],
    /// Eigenvalues (descending, clamped at zero) and unit eigenvectors of sigma.
    eigval: [f64; 2],
    eigvec: [[f64; 2]; 2],
    rank: usize,
}

impl Gaussian2 {
    pub fn new(mu: [f64; 2], sigma: [[f64; 2]; 2]) -> Self {
        let (a, b, d) = (sigma[0][0], 0.5 * (sigma[0][1] + sigma[1][0]), sigma[1][1]);
        let theta = 0.5 * (2.0 * b).atan2(a - d);
        let (s, c) = theta.sin_cos();
        let v1 = [c, s];
        let v2 = [-s, c];
        let rayleigh = |v: [f64; 2]| a * v[0] * v[0] + 2.0 * b * v[0] * v[1] + d * v[1] * v[1];
        let (mut l1, mut l2) = (rayleigh(v1).max(0.0), rayleigh(v2).max(0.0));
        let (mut e1, mut e2) = (v1, v2);
        if l2 > l1 {
            std::mem::swap(&mut l1, &mut l2);
            std::mem::swap(&mut e1, &mut e2);
        }
        let tol = 1e-12 * l1.max(f64::MIN_POSITIVE);
        let rank = if l1 <= f64::MIN_POSITIVE {
            0
        } else if l2 <= tol {
            1
        } else {
            2
        };
        Gaussian2 {
            mu,
            sigma,
            eigval: [l1, l2],
            eigvec: [e1, e2],
            rank,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Squared Mahalanobis distance through the pseudo-inverse, or `None` when
    /// `x` lies off the support subspace of a singular covariance.
    pub fn mahalanobis_sq(&self, x: [f64; 2]) -> Option<f64> {
        let d = [x[0] - self.mu[0], x[1] - self.mu[1]];
        let norm = (d[0] * d[0] + d[1] * d[1]).sqrt();
        let tol = 1e-9 * (1.0 + norm);
        let mut m2 = 0.0;
        for i in 0..2 {
            let p = self.eigvec[i][0] * d[0] + self.eigvec[i][1] * d[1];
            if i < self.rank {
                m2 += p * p / self.eigval[i];
            } else if p.abs() > tol {
                return None;
            }
        }
        Some(m2)
    }

    /// Log density on the support subspace; `-inf` off it.
    pub fn log_density(&self, x: [f64; 2]) -> f64 {
        match self.mahalanobis_sq(x) {
            None => f64::NEG_INFINITY,
            Some(m2) => {
                let r = self.rank as f64;
                let log_pdet: f64 = self.eigval[..self.rank].iter().map(|l| l.ln()).sum();
                -0.5 * r * (2.0 * PI).ln() - 0.5 * log_pdet - 0.5 * m2
            }
        }
    }

    /// `exp(-½ (x−μ)ᵀ Σ⁺ (x−μ))`, which is 1 at the mean and 0 off the support.
    pub fn relative_likelihood(&self, x: [f64; 2]) -> f64 {
        self.mahalanobis_sq(x).map_or(0.0, |m2| (-0.5 * m2).exp())
    }

    fn from_whitened(&self, w: [f64; 2]) -> [f64; 2] {
        let mut x = self.mu;
        for i in 0..self.rank {
            let s = self.eigval[i].sqrt() * w[i];
            x[0] += s * self.eigvec[i][0];
            x[1] += s * self.eigvec[i][1];
        }
        x
    }

    /// Draws from the distribution conditioned on `relative_likelihood < threshold`.
    /// Returns `None` when no such point exists (rank-0 covariance).
    pub fn sample_low_likelihood<R: Rng>(&self, threshold: f64, rng: &mut R) -> Option<[f64; 2]> {
        let min_m2 = 2.0 * (1.0 / threshold).ln();
        for _ in 0..64 {
            let w = match self.rank {
                0 => return None,
                // The squared radius of a 2-d standard normal is exponential with
                // mean 2, and memoryless, so the tail beyond min_m2 is a shift.
                2 => {
                    let u: f64 = 1.0 - rng.random::<f64>();
                    let r = (min_m2 - 2.0 * u.ln()).sqrt();
                    let phi = 2.0 * PI * rng.random::<f64>();
                    [r * phi.cos(), r * phi.sin()]
                }
                _ => {
                    // |s| from the standard normal tail beyond sqrt(min_m2), by inversion.
                    let n = Normal::standard();
                    let tail = n.cdf(-min_m2.sqrt());
                    let u: f64 = 1.0 - rng.random::<f64>();
                    let s = -n.inverse_cdf(u * tail);
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    [sign * s, 0.0]
                }
            };
            let x = self.from_whitened(w);
            if self.relative_likelihood(x) < threshold {
                return Some(x);
            }
        }
        None
    }
}

/// Free-standing form of [`Gaussian2::relative_likelihood`] for a dataset class.
pub fn relative_likelihood(class: &GaussianClass, x: [f64; 2]) -> f64 {
    class.gaussian().relative_likelihood(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianConfig {
    pub num_classes: usize,
    pub instances_per_class: usize,
    /// Class counts for meta-train, meta-val and meta-test, in that order.
    pub split_sizes: [usize; 3],
    /// Instances per meta-train class withheld as the auxiliary split.
    pub aux_holdout: usize,
    /// Means are drawn from `U[-mu_range, mu_range]²`.
    pub mu_range: f64,
    /// Entries of Σ′ are drawn from `U[-sigma_prime_range, sigma_prime_range]`.
    pub sigma_prime_range: f64,
}

impl Default for GaussianConfig {
    fn default() -> Self {
        GaussianConfig {
            num_classes: 100,
            instances_per_class: 100,
            split_sizes: [64, 16, 20],
            aux_holdout: 20,
            mu_range: 10.0,
            sigma_prime_range: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianClass {
    pub id: usize,
    pub mu: [f64; 2],
    pub sigma_prime: [[f64; 2]; 2],
    /// `Σ′ᵀ Σ′`.
    pub sigma: [[f64; 2]; 2],
    pub split: Split,
    pub instances: Vec<[f64; 2]>,
}

impl GaussianClass {
    pub fn gaussian(&self) -> Gaussian2 {
        Gaussian2::new(self.mu, self.sigma)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianDataset {
    pub version: u32,
    pub seed: u64,
    pub config: GaussianConfig,
    pub classes: Vec<GaussianClass>,
}

impl GaussianDataset {
    pub fn class(&self, id: usize) -> Result<&GaussianClass> {
        self.classes
            .get(id)
            .ok_or_else(|| Error::Index(format!("class {id} out of range ({} classes)", self.classes.len())))
    }

    pub fn class_ids(&self, split: Split) -> Vec<usize> {
        self.classes.iter().filter(|c| c.split == split).map(|c| c.id).collect()
    }

    fn train_count(&self, class: &GaussianClass) -> usize {
        if class.split == Split::MetaTrain {
            class.instances.len().saturating_sub(self.config.aux_holdout)
        } else {
            class.instances.len()
        }
    }

    /// Instances that episodes and pre-training may use. For meta-train classes
    /// this excludes the auxiliary holdout at the tail.
    pub fn episode_pool(&self, id: usize) -> Result<&[[f64; 2]]> {
        let c = self.class(id)?;
        Ok(&c.instances[..self.train_count(c)])
    }

    /// Held-out instances of a meta-train class (empty for other splits).
    pub fn aux_instances(&self, id: usize) -> Result<&[[f64; 2]]> {
        let c = self.class(id)?;
        Ok(&c.instances[self.train_count(c)..])
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(self)?)
    }
}

/// 100 random 2-d Gaussian classes (by default) with means in `[-10, 10]²`,
/// covariances `Σ′ᵀΣ′`, `Σ′ ~ U^{2x2}[-2, 2]`, and split into 64/16/20 classes.
pub fn gen_gaussian_dataset(seed: u64, cfg: &GaussianConfig) -> Result<GaussianDataset> {
    if cfg.split_sizes.iter().sum::<usize>() != cfg.num_classes {
        return Err(Error::Config(format!(
            "split sizes {:?} do not add up to {} classes",
            cfg.split_sizes, cfg.num_classes
        )));
    }
    if cfg.aux_holdout >= cfg.instances_per_class {
        return Err(Error::Config(format!(
            "auxiliary holdout {} leaves no training instances out of {}",
            cfg.aux_holdout, cfg.instances_per_class
        )));
    }
    let mut rng = util::rng(seed);
    let mut classes = Vec::with_capacity(cfg.num_classes);
    for id in 0..cfg.num_classes {
        let split = if id < cfg.split_sizes[0] {
            Split::MetaTrain
        } else if id < cfg.split_sizes[0] + cfg.split_sizes[1] {
            Split::MetaVal
        } else {
            Split::MetaTest
        };
        let m = cfg.mu_range;
        let mu = [rng.random_range(-m..=m), rng.random_range(-m..=m)];
        let s = cfg.sigma_prime_range;
        let sp = [
            [rng.random_range(-s..=s), rng.random_range(-s..=s)],
            [rng.random_range(-s..=s), rng.random_range(-s..=s)],
        ];
        // Σ = Σ′ᵀΣ′
        let sigma = [
            [
                sp[0][0] * sp[0][0] + sp[1][0] * sp[1][0],
                sp[0][0] * sp[0][1] + sp[1][0] * sp[1][1],
            ],
            [
                sp[0][1] * sp[0][0] + sp[1][1] * sp[1][0],
                sp[0][1] * sp[0][1] + sp[1][1] * sp[1][1],
            ],
        ];
        // x = μ + Σ′ᵀ z has covariance Σ′ᵀΣ′.
        let instances = (0..cfg.instances_per_class)
            .map(|_| {
                let z0: f64 = StandardNormal.sample(&mut rng);
                let z1: f64 = StandardNormal.sample(&mut rng);
                [
                    mu[0] + sp[0][0] * z0 + sp[1][0] * z1,
                    mu[1] + sp[0][1] * z0 + sp[1][1] * z1,
                ]
            })
            .collect();
        classes.push(GaussianClass {
            id,
            mu,
            sigma_prime: sp,
            sigma,
            split,
            instances,
        });
    }
    Ok(GaussianDataset {
        version: DATASET_VERSION,
        seed,
        config: cfg.clone(),
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_and_instance_counts() {
        let ds = gen_gaussian_dataset(1, &GaussianConfig::default()).unwrap();
        assert_eq!(ds.classes.len(), 100);
        assert_eq!(ds.class_ids(Split::MetaTrain).len(), 64);
        assert_eq!(ds.class_ids(Split::MetaVal).len(), 16);
        assert_eq!(ds.class_ids(Split::MetaTest).len(), 20);
        assert!(ds.classes.iter().all(|c| c.instances.len() == 100));
        assert_eq!(ds.episode_pool(0).unwrap().len(), 80);
        assert_eq!(ds.aux_instances(0).unwrap().len(), 20);
        assert_eq!(ds.episode_pool(90).unwrap().len(), 100);
        assert!(ds.aux_instances(90).unwrap().is_empty());
    }

    #[test]
    fn covariances_are_psd_and_symmetric() {
        let ds = gen_gaussian_dataset(2, &GaussianConfig::default()).unwrap();
        for c in &ds.classes {
            assert_eq!(c.sigma[0][1], c.sigma[1][0]);
            let tr = c.sigma[0][0] + c.sigma[1][1];
            let det = c.sigma[0][0] * c.sigma[1][1] - c.sigma[0][1] * c.sigma[1][0];
            assert!(tr >= 0.0 && det >= -1e-12);
            assert!(c.sigma_prime.iter().flatten().all(|v| (-2.0..=2.0).contains(v)));
            assert!(c.mu.iter().all(|v| (-10.0..=10.0).contains(v)));
        }
    }

    #[test]
    fn sample_means_near_class_means() {
        let ds = gen_gaussian_dataset(3, &GaussianConfig::default()).unwrap();
        let close = ds
            .classes
            .iter()
            .filter(|c| {
                let n = c.instances.len() as f64;
                let m = [
                    c.instances.iter().map(|x| x[0]).sum::<f64>() / n,
                    c.instances.iter().map(|x| x[1]).sum::<f64>() / n,
                ];
                let dist = ((m[0] - c.mu[0]).powi(2) + (m[1] - c.mu[1]).powi(2)).sqrt();
                let tr = c.sigma[0][0] + c.sigma[1][1];
                dist <= 3.0 * (tr / 100.0).sqrt()
            })
            .count();
        assert!(close >= 95, "{close}");
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = gen_gaussian_dataset(1, &GaussianConfig::default()).unwrap();
        let b = gen_gaussian_dataset(1, &GaussianConfig::default()).unwrap();
        assert_eq!(util::sha256_hex(&a.to_json().unwrap()), util::sha256_hex(&b.to_json().unwrap()));
    }

    #[test]
    fn likelihood_closed_forms() {
        let g = Gaussian2::new([1.0, -2.0], [[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(g.relative_likelihood([1.0, -2.0]), 1.0);
        assert!((g.relative_likelihood([3.0, -2.0]) - (-2f64).exp()).abs() < 1e-15);
        // rl < 0.3 exactly when the squared distance exceeds 2 ln(1/0.3).
        let cut = 2.0 * (1.0f64 / 0.3).ln();
        assert!((cut - 2.408).abs() < 1e-3);
        let inside = [1.0 + (cut - 1e-6).sqrt(), -2.0];
        let outside = [1.0 + (cut + 1e-6).sqrt(), -2.0];
        assert!(g.relative_likelihood(inside) > 0.3);
        assert!(g.relative_likelihood(outside) < 0.3);
    }

    #[test]
    fn singular_covariance_uses_the_support_line() {
        // Σ = u uᵀ with u = (1, 1)/√2 · 2, i.e. variance 4 along the diagonal.
        let g = Gaussian2::new([0.0, 0.0], [[2.0, 2.0], [2.0, 2.0]]);
        assert_eq!(g.rank(), 1);
        let on = [1.0, 1.0];
        // Distance √2 along a direction with variance 4.
        assert!((g.mahalanobis_sq(on).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(g.relative_likelihood([1.0, -1.0]), 0.0);
        assert_eq!(g.log_density([1.0, -1.0]), f64::NEG_INFINITY);
    }

    #[test]
    fn low_likelihood_draws_respect_the_bound() {
        let mut rng = util::rng(8);
        let g = Gaussian2::new([0.5, 0.5], [[2.0, 0.3], [0.3, 0.5]]);
        let line = Gaussian2::new([0.0, 0.0], [[1.0, 1.0], [1.0, 1.0]]);
        for t in [0.7, 0.3, 0.1, 1e-6] {
            for _ in 0..200 {
                let x = g.sample_low_likelihood(t, &mut rng).unwrap();
                assert!(g.relative_likelihood(x) < t);
                let y = line.sample_low_likelihood(t, &mut rng).unwrap();
                assert!(line.relative_likelihood(y) < t && line.relative_likelihood(y) > 0.0);
            }
        }
        let point = Gaussian2::new([0.0, 0.0], [[0.0, 0.0], [0.0, 0.0]]);
        assert!(point.sample_low_likelihood(0.5, &mut rng).is_none());
    }
}
