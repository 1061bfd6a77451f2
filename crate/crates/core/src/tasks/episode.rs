use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

use super::{GaussianDataset, Split};

/// A labelled point inside an episode. `label` indexes the episode's
/// `class_ids`; `instance` is the dataset index when the point was drawn from
/// the stored instances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodePoint {
    pub x: [f64; 2],
    pub label: usize,
    pub instance: Option<usize>,
}

/// An N-way K-shot classification task. Support points are grouped by label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub class_ids: Vec<usize>,
    pub shot: usize,
    pub queries_per_class: usize,
    pub support: Vec<EpisodePoint>,
    pub query: Vec<EpisodePoint>,
}

/// Compact per-episode log record: class ids plus instance indices per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub class_ids: Vec<usize>,
    pub support: Vec<Option<usize>>,
    pub query: Vec<Option<usize>>,
}

fn inputs(points: &[EpisodePoint]) -> Matrix {
    Matrix::from_fn(points.len(), 2, |r, c| points[r].x[c])
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.class_ids.len()
    }

    pub fn support_inputs(&self) -> Matrix {
        inputs(&self.support)
    }

    pub fn query_inputs(&self) -> Matrix {
        inputs(&self.query)
    }

    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|p| p.label).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|p| p.label).collect()
    }

    /// Global class id of an episode label.
    pub fn global_label(&self, local: usize) -> Option<usize> {
        self.class_ids.get(local).copied()
    }

    /// Episode label of a global class id.
    pub fn local_label(&self, global: usize) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == global)
    }

    pub fn log_record(&self) -> EpisodeLog {
        EpisodeLog {
            class_ids: self.class_ids.clone(),
            support: self.support.iter().map(|p| p.instance).collect(),
            query: self.query.iter().map(|p| p.instance).collect(),
        }
    }
}

fn pick_classes<R: Rng>(ds: &GaussianDataset, split: Split, n: usize, rng: &mut R) -> Result<Vec<usize>> {
    let pool = ds.class_ids(split);
    if n == 0 {
        return Err(Error::Config("an episode needs at least one class".into()));
    }
    if pool.len() < n {
        return Err(Error::Config(format!(
            "{split} has {} classes, a {n}-way episode needs {n}",
            pool.len()
        )));
    }
    Ok(index::sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect())
}

/// Uniformly samples `n` classes from `split` and, per class, `k + q`
/// distinct instances; the first `k` form the support set.
pub fn sample_episode<R: Rng>(
    ds: &GaussianDataset,
    split: Split,
    n: usize,
    k: usize,
    q: usize,
    rng: &mut R,
) -> Result<Episode> {
    if k == 0 {
        return Err(Error::Config("an episode needs at least one shot".into()));
    }
    let class_ids = pick_classes(ds, split, n, rng)?;
    let mut support = Vec::with_capacity(n * k);
    let mut query = Vec::with_capacity(n * q);
    for (label, &cid) in class_ids.iter().enumerate() {
        let pool = ds.episode_pool(cid)?;
        if pool.len() < k + q {
            return Err(Error::Config(format!(
                "class {cid} has {} usable instances, episode needs {}",
                pool.len(),
                k + q
            )));
        }
        let picks = index::sample(rng, pool.len(), k + q).into_vec();
        for (j, &i) in picks.iter().enumerate() {
            let p = EpisodePoint {
                x: pool[i],
                label,
                instance: Some(i),
            };
            if j < k {
                support.push(p);
            } else {
                query.push(p);
            }
        }
    }
    Ok(Episode {
        class_ids,
        shot: k,
        queries_per_class: q,
        support,
        query,
    })
}

/// Like [`sample_episode`], but every instance has relative likelihood below
/// `threshold` under its own class. Points are drawn from each class
/// distribution conditioned on that bound, so they are not dataset instances.
/// Classes that cannot produce such points are swapped out, at most
/// `max_retries` times.
#[allow(clippy::too_many_arguments)]
pub fn sample_biased_episode<R: Rng>(
    ds: &GaussianDataset,
    split: Split,
    n: usize,
    k: usize,
    q: usize,
    threshold: f64,
    max_retries: usize,
    rng: &mut R,
) -> Result<Episode> {
    if threshold >= 1.0 {
        return sample_episode(ds, split, n, k, q, rng);
    }
    if !(threshold > 0.0) {
        return Err(Error::Config(format!("likelihood threshold must be positive, got {threshold}")));
    }
    if k == 0 {
        return Err(Error::Config("an episode needs at least one shot".into()));
    }
    let mut class_ids = pick_classes(ds, split, n, rng)?;
    let mut retries = 0;
    let mut support = Vec::with_capacity(n * k);
    let mut query = Vec::with_capacity(n * q);
    let mut label = 0;
    while label < class_ids.len() {
        let cid = class_ids[label];
        let g = ds.class(cid)?.gaussian();
        let mut drawn = Vec::with_capacity(k + q);
        for _ in 0..k + q {
            match g.sample_low_likelihood(threshold, rng) {
                Some(x) => drawn.push(x),
                None => break,
            }
        }
        if drawn.len() < k + q {
            retries += 1;
            let unused: Vec<usize> = ds
                .class_ids(split)
                .into_iter()
                .filter(|c| !class_ids.contains(c))
                .collect();
            if retries > max_retries || unused.is_empty() {
                return Err(Error::Sampling {
                    class: cid,
                    detail: format!("no instances below likelihood {threshold} after {retries} retries"),
                });
            }
            class_ids[label] = unused[rng.random_range(0..unused.len())];
            continue;
        }
        for (j, x) in drawn.into_iter().enumerate() {
            let p = EpisodePoint {
                x,
                label,
                instance: None,
            };
            if j < k {
                support.push(p);
            } else {
                query.push(p);
            }
        }
        label += 1;
    }
    Ok(Episode {
        class_ids,
        shot: k,
        queries_per_class: q,
        support,
        query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{gen_gaussian_dataset, GaussianConfig};
    use crate::util;

    fn dataset() -> GaussianDataset {
        gen_gaussian_dataset(11, &GaussianConfig::default()).unwrap()
    }

    #[test]
    fn counts_and_class_membership() {
        let ds = dataset();
        let mut rng = util::rng(1);
        let ep = sample_episode(&ds, Split::MetaTrain, 5, 10, 15, &mut rng).unwrap();
        assert_eq!(ep.support.len(), 50);
        assert_eq!(ep.query.len(), 75);
        let train = ds.class_ids(Split::MetaTrain);
        let mut ids = ep.class_ids.clone();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 5);
        assert!(ids.iter().all(|c| train.contains(c)));
        for label in 0..5 {
            assert_eq!(ep.support.iter().filter(|p| p.label == label).count(), 10);
            assert_eq!(ep.query.iter().filter(|p| p.label == label).count(), 15);
        }
    }

    #[test]
    fn support_and_query_are_disjoint_draws() {
        let ds = dataset();
        let mut rng = util::rng(2);
        let ep = sample_episode(&ds, Split::MetaTest, 5, 10, 15, &mut rng).unwrap();
        for s in &ep.support {
            assert!(!ep
                .query
                .iter()
                .any(|q| q.label == s.label && q.instance == s.instance));
        }
    }

    #[test]
    fn label_remap_is_bijective() {
        let ds = dataset();
        let mut rng = util::rng(3);
        let ep = sample_episode(&ds, Split::MetaVal, 5, 1, 1, &mut rng).unwrap();
        for local in 0..5 {
            let g = ep.global_label(local).unwrap();
            assert_eq!(ep.local_label(g), Some(local));
        }
        assert!(ep.support.iter().chain(&ep.query).all(|p| p.label < 5));
    }

    #[test]
    fn different_rng_states_give_different_episodes() {
        let ds = dataset();
        let a = sample_episode(&ds, Split::MetaTrain, 5, 10, 15, &mut util::rng(4)).unwrap();
        let b = sample_episode(&ds, Split::MetaTrain, 5, 10, 15, &mut util::rng(5)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn insufficient_classes_or_instances() {
        let ds = dataset();
        let mut rng = util::rng(6);
        assert!(matches!(
            sample_episode(&ds, Split::MetaVal, 17, 1, 1, &mut rng),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            sample_episode(&ds, Split::MetaTrain, 5, 70, 15, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn threshold_one_is_plain_sampling() {
        let ds = dataset();
        let a = sample_biased_episode(&ds, Split::MetaTest, 5, 10, 15, 1.0, 10, &mut util::rng(7)).unwrap();
        let b = sample_episode(&ds, Split::MetaTest, 5, 10, 15, &mut util::rng(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn biased_points_respect_the_threshold() {
        let ds = dataset();
        let mut rng = util::rng(8);
        for t in [0.7, 0.5, 0.3, 0.1] {
            let ep = sample_biased_episode(&ds, Split::MetaTest, 5, 10, 15, t, 10, &mut rng).unwrap();
            assert_eq!(ep.support.len(), 50);
            assert_eq!(ep.query.len(), 75);
            for p in ep.support.iter().chain(&ep.query) {
                let cls = ds.class(ep.class_ids[p.label]).unwrap();
                assert!(crate::tasks::relative_likelihood(cls, p.x) < t);
            }
        }
    }

    #[test]
    fn starved_classes_are_reported() {
        let mut ds = dataset();
        for c in &mut ds.classes {
            c.sigma = [[0.0, 0.0], [0.0, 0.0]];
        }
        let err = sample_biased_episode(&ds, Split::MetaTest, 5, 10, 15, 0.3, 3, &mut util::rng(9)).unwrap_err();
        assert!(matches!(err, Error::Sampling { .. }));
    }
}
