use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::targets::{bayes_predict, first_argmax};
use crate::tasks::{Episode, EpisodePoint, GaussianDataset};

/// Half-width of the square exported around the origin.
pub const BOUNDARY_EXTENT: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryCell {
    pub x: f64,
    pub y: f64,
    pub class: usize,
    pub max_prob: f64,
}

/// Row-major grid of cell centres over `[-10, 10]²`; cell `(i, j)` sits at
/// column `i`, row `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryGrid {
    pub resolution: usize,
    pub extent: f64,
    pub source: String,
    pub class_ids: Vec<usize>,
    pub cells: Vec<BoundaryCell>,
    pub support: Vec<EpisodePoint>,
}

impl BoundaryGrid {
    pub fn cell_width(&self) -> f64 {
        2.0 * self.extent / self.resolution as f64
    }

    /// Index of the cell containing `p` (points on the outer edge belong to
    /// the last cell).
    pub fn cell_index(&self, p: [f64; 2]) -> Option<usize> {
        let w = self.cell_width();
        let idx = |v: f64| {
            if !(-self.extent..=self.extent).contains(&v) {
                return None;
            }
            Some((((v + self.extent) / w) as usize).min(self.resolution - 1))
        };
        Some(idx(p[1])? * self.resolution + idx(p[0])?)
    }
}

/// Classifies every cell with `classify`, which maps an `m × 2` input matrix
/// to `m × N` class probabilities.
pub fn boundary_grid(
    resolution: usize,
    episode: &Episode,
    source: &str,
    classify: impl Fn(&Matrix) -> Result<Matrix>,
) -> Result<BoundaryGrid> {
    if resolution < 50 {
        return Err(Error::Config(format!("boundary resolution must be at least 50, got {resolution}")));
    }
    let w = 2.0 * BOUNDARY_EXTENT / resolution as f64;
    let centre = |i: usize| -BOUNDARY_EXTENT + (i as f64 + 0.5) * w;
    let mut cells = Vec::with_capacity(resolution * resolution);
    for j in 0..resolution {
        let row: Vec<[f64; 2]> = (0..resolution).map(|i| [centre(i), centre(j)]).collect();
        let probs = classify(&Matrix::from_rows(&row)?)?;
        if probs.rows() != resolution || probs.cols() != episode.n_way() {
            return Err(Error::Shape(format!(
                "classifier returned {}x{}, expected {}x{}",
                probs.rows(),
                probs.cols(),
                resolution,
                episode.n_way()
            )));
        }
        for (p, r) in row.iter().zip(probs.iter_rows()) {
            let class = first_argmax(r);
            cells.push(BoundaryCell {
                x: p[0],
                y: p[1],
                class,
                max_prob: r[class],
            });
        }
    }
    Ok(BoundaryGrid {
        resolution,
        extent: BOUNDARY_EXTENT,
        source: source.to_string(),
        class_ids: episode.class_ids.clone(),
        cells,
        support: episode.support.clone(),
    })
}

/// Bayes posterior over the episode's classes, in episode label order.
pub fn bayes_classifier<'a>(ds: &'a GaussianDataset, episode: &Episode) -> Result<impl Fn(&Matrix) -> Result<Matrix> + 'a> {
    let classes = episode
        .class_ids
        .iter()
        .map(|&id| ds.class(id).cloned())
        .collect::<Result<Vec<_>>>()?;
    Ok(move |x: &Matrix| {
        let rows: Vec<Vec<f64>> = x.iter_rows().map(|r| bayes_predict(&classes, [r[0], r[1]]).probs).collect();
        Matrix::from_rows(&rows)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{GaussianClass, Split};

    fn two_class_dataset() -> GaussianDataset {
        let sigma = [[2.0, 0.5], [0.5, 1.0]];
        let class = |id: usize, mu: [f64; 2]| GaussianClass {
            id,
            mu,
            sigma_prime: sigma,
            sigma,
            split: Split::MetaTest,
            instances: Vec::new(),
        };
        GaussianDataset {
            version: 1,
            seed: 0,
            config: Default::default(),
            classes: vec![class(0, [-3.0, 1.0]), class(1, [2.0, -1.5])],
        }
    }

    fn episode() -> Episode {
        let p = |x: [f64; 2], label| EpisodePoint { x, label, instance: None };
        Episode {
            class_ids: vec![0, 1],
            shot: 2,
            queries_per_class: 0,
            support: vec![p([-3.0, 1.2], 0), p([-2.1, 0.3], 0), p([2.2, -1.0], 1), p([1.4, -2.3], 1)],
            query: Vec::new(),
        }
    }

    #[test]
    fn grid_has_resolution_squared_cells_covering_the_extent() {
        let ds = two_class_dataset();
        let e = episode();
        let g = boundary_grid(200, &e, "bayes", bayes_classifier(&ds, &e).unwrap()).unwrap();
        assert_eq!(g.cells.len(), 40_000);
        let w = g.cell_width();
        assert!((g.cells[0].x - (-10.0 + w / 2.0)).abs() < 1e-12);
        assert!((g.cells.last().unwrap().y - (10.0 - w / 2.0)).abs() < 1e-12);
        assert_eq!(g.cell_index([-10.0, -10.0]), Some(0));
        assert_eq!(g.cell_index([10.0, 10.0]), Some(40_000 - 1));
        assert_eq!(g.cell_index([10.5, 0.0]), None);
    }

    #[test]
    fn low_resolution_is_rejected() {
        let ds = two_class_dataset();
        let e = episode();
        assert!(boundary_grid(49, &e, "bayes", bayes_classifier(&ds, &e).unwrap()).is_err());
    }

    /// Shared covariance: the Bayes boundary is the line w·x = t with
    /// w = Σ⁻¹(μ1 − μ0) and t = w·(μ0 + μ1)/2.
    #[test]
    fn shared_covariance_boundary_is_the_lda_line() {
        let ds = two_class_dataset();
        let e = episode();
        let g = boundary_grid(100, &e, "bayes", bayes_classifier(&ds, &e).unwrap()).unwrap();
        let (m0, m1) = (ds.classes[0].mu, ds.classes[1].mu);
        let s = ds.classes[0].sigma;
        let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
        let inv = [[s[1][1] / det, -s[0][1] / det], [-s[1][0] / det, s[0][0] / det]];
        let d = [m1[0] - m0[0], m1[1] - m0[1]];
        let w = [inv[0][0] * d[0] + inv[0][1] * d[1], inv[1][0] * d[0] + inv[1][1] * d[1]];
        let mid = [(m0[0] + m1[0]) / 2.0, (m0[1] + m1[1]) / 2.0];
        let t = w[0] * mid[0] + w[1] * mid[1];
        let norm = (w[0] * w[0] + w[1] * w[1]).sqrt();
        let tol = g.cell_width() * std::f64::consts::SQRT_2;
        for c in &g.cells {
            let dist = (w[0] * c.x + w[1] * c.y - t) / norm;
            if dist.abs() > tol {
                assert_eq!(c.class, usize::from(dist > 0.0), "cell ({}, {})", c.x, c.y);
            }
        }
    }

    #[test]
    fn support_cells_agree_with_direct_bayes_prediction() {
        let ds = two_class_dataset();
        let e = episode();
        let g = boundary_grid(60, &e, "bayes", bayes_classifier(&ds, &e).unwrap()).unwrap();
        for p in &e.support {
            let cell = g.cells[g.cell_index(p.x).unwrap()];
            let direct = bayes_predict(&ds.classes, [cell.x, cell.y]);
            assert_eq!(cell.class, direct.argmax);
        }
    }
}
