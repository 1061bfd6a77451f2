//! Task hardness. Classification tasks are scored by the sum of the cosine
//! similarity sub-matrix of their classes (pretrained class centres);
//! sinusoid tasks by a parameter heuristic such as `a − b`.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, MlpModel};
use crate::tasks::{GaussianDataset, SinusoidTask};
use crate::util::rng;

/// Mean trunk embedding of every training instance of each class, one row per
/// entry of `class_ids`.
pub fn class_centers(trunk: &MlpModel, dataset: &GaussianDataset, class_ids: &[usize]) -> Result<Matrix> {
    let mut centers = Matrix::zeros(class_ids.len(), trunk.output_dim());
    for (row, &id) in class_ids.iter().enumerate() {
        let pool = dataset.episode_pool(id)?;
        if pool.is_empty() {
            return Err(Error::Config(format!("class {id} has no instances")));
        }
        let emb = trunk.forward(&Matrix::from_rows(pool)?)?;
        let inv = 1.0 / pool.len() as f64;
        for r in emb.iter_rows() {
            for (c, &v) in centers.row_mut(row).iter_mut().zip(r) {
                *c += v * inv;
            }
        }
    }
    Ok(centers)
}

/// Cosine similarities between class centres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub class_ids: Vec<usize>,
    pub values: Matrix,
    pub source: String,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.values.get(u, v)
    }

    fn index_of(&self, id: usize) -> Result<usize> {
        self.class_ids
            .iter()
            .position(|&c| c == id)
            .ok_or_else(|| Error::Index(format!("class {id} is not in the similarity matrix")))
    }

    /// Symmetric, unit diagonal, entries in `[−1, 1]`.
    pub fn check_invariants(&self) -> Result<()> {
        let n = self.len();
        for u in 0..n {
            if (self.get(u, u) - 1.0).abs() > 1e-9 {
                return Err(Error::NonFinite(format!("diagonal entry {u} is {}", self.get(u, u))));
            }
            for v in 0..n {
                let f = self.get(u, v);
                if !(-1.0..=1.0).contains(&f) || f != self.get(v, u) {
                    return Err(Error::NonFinite(format!("entry ({u},{v}) = {f} breaks symmetry or range")));
                }
            }
        }
        Ok(())
    }
}

/// `F_uv = ⟨c_u, c_v⟩ / (‖c_u‖ ‖c_v‖)`. A zero-norm centre gets a unit
/// diagonal and zero off-diagonal entries.
pub fn similarity_matrix(centers: &Matrix, class_ids: &[usize], source: &str) -> Result<SimilarityMatrix> {
    if centers.rows() != class_ids.len() {
        return Err(Error::Shape(format!(
            "{} centres for {} classes",
            centers.rows(),
            class_ids.len()
        )));
    }
    let n = centers.rows();
    let norms: Vec<f64> = centers.iter_rows().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    for (u, &norm) in norms.iter().enumerate() {
        if norm == 0.0 {
            log::warn!("class {} has a zero-norm centre; its similarities are set to 0", class_ids[u]);
        }
    }
    let mut values = Matrix::zeros(n, n);
    for u in 0..n {
        values.set(u, u, 1.0);
        for v in (u + 1)..n {
            let f = if norms[u] == 0.0 || norms[v] == 0.0 {
                0.0
            } else {
                let dot: f64 = centers.row(u).iter().zip(centers.row(v)).map(|(a, b)| a * b).sum();
                (dot / (norms[u] * norms[v])).clamp(-1.0, 1.0)
            };
            values.set(u, v, f);
            values.set(v, u, f);
        }
    }
    let sm = SimilarityMatrix {
        class_ids: class_ids.to_vec(),
        values,
        source: source.to_string(),
    };
    sm.check_invariants()?;
    Ok(sm)
}

/// Sum of every entry of the sub-matrix over the task's classes, diagonal included.
pub fn task_hardness(f: &SimilarityMatrix, class_ids: &[usize]) -> Result<f64> {
    let idx: Vec<usize> = class_ids.iter().map(|&id| f.index_of(id)).collect::<Result<_>>()?;
    let mut total = 0.0;
    for &u in &idx {
        for &v in &idx {
            total += f.get(u, v);
        }
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SinusoidMetric {
    #[default]
    AMinusB,
    A,
    NegB,
    AOverB,
}

impl fmt::Display for SinusoidMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SinusoidMetric::AMinusB => "a_minus_b",
            SinusoidMetric::A => "a",
            SinusoidMetric::NegB => "neg_b",
            SinusoidMetric::AOverB => "a_over_b",
        })
    }
}

impl FromStr for SinusoidMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a_minus_b" => Ok(SinusoidMetric::AMinusB),
            "a" => Ok(SinusoidMetric::A),
            "neg_b" => Ok(SinusoidMetric::NegB),
            "a_over_b" => Ok(SinusoidMetric::AOverB),
            other => Err(Error::Config(format!("unknown hardness metric `{other}`"))),
        }
    }
}

pub fn sinusoid_hardness(task: &SinusoidTask, metric: SinusoidMetric) -> f64 {
    match metric {
        SinusoidMetric::AMinusB => task.a - task.b,
        SinusoidMetric::A => task.a,
        SinusoidMetric::NegB => -task.b,
        SinusoidMetric::AOverB => task.a / task.b,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    #[default]
    Hardness,
    Random,
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionMode::Hardness => "hardness",
            SelectionMode::Random => "random",
        })
    }
}

impl FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hardness" => Ok(SelectionMode::Hardness),
            "random" => Ok(SelectionMode::Random),
            other => Err(Error::Config(format!("unknown selection mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub task: usize,
    pub score: f64,
    pub selected: bool,
}

/// Tasks sorted by decreasing score (ties by task index) with the selection flag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardnessRanking {
    pub entries: Vec<RankEntry>,
    pub metric: String,
    pub ratio: f64,
    pub mode: SelectionMode,
}

impl HardnessRanking {
    /// Per-task flag, indexed by task.
    pub fn selected_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.entries.len()];
        for e in &self.entries {
            mask[e.task] = e.selected;
        }
        mask
    }

    pub fn selected_tasks(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.entries.iter().filter(|e| e.selected).map(|e| e.task).collect();
        t.sort_unstable();
        t
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,score,selected,metric\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{},{}\n", e.task, e.score, e.selected as u8, self.metric));
        }
        out
    }
}

/// Indices sorted by decreasing score; equal scores keep index order.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    order
}

/// Marks `round(r · n)` tasks as having a target: the top-scored ones in
/// hardness mode, a seeded uniform sample in random mode.
pub fn select_hard_tasks(scores: &[f64], ratio: f64, mode: SelectionMode, metric: &str, seed: u64) -> Result<HardnessRanking> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("target ratio {ratio} outside [0, 1]")));
    }
    let count = (ratio * scores.len() as f64).round() as usize;
    select_count(scores, count, ratio, mode, metric, seed)
}

/// Same as [`select_hard_tasks`] with an absolute count.
pub fn select_count(scores: &[f64], count: usize, ratio: f64, mode: SelectionMode, metric: &str, seed: u64) -> Result<HardnessRanking> {
    if count > scores.len() {
        return Err(Error::Config(format!("cannot select {count} of {} tasks", scores.len())));
    }
    let order = rank_by_score(scores);
    let mut selected = vec![false; scores.len()];
    match mode {
        SelectionMode::Hardness => order[..count].iter().for_each(|&i| selected[i] = true),
        SelectionMode::Random => {
            let mut idx: Vec<usize> = (0..scores.len()).collect();
            idx.shuffle(&mut rng(seed));
            idx[..count].iter().for_each(|&i| selected[i] = true);
        }
    }
    Ok(HardnessRanking {
        entries: order
            .iter()
            .map(|&i| RankEntry {
                task: i,
                score: scores[i],
                selected: selected[i],
            })
            .collect(),
        metric: metric.to_string(),
        ratio,
        mode,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardnessBin {
    pub bin: usize,
    pub count: usize,
    pub min_score: f64,
    pub max_score: f64,
    pub mean: f64,
}

/// Equal-count bins by ascending score (bin 0 is the easiest); each reports
/// the mean of `values` over its tasks.
pub fn hardness_bins_report(scores: &[f64], values: &[f64], bins: usize) -> Result<Vec<HardnessBin>> {
    if scores.len() != values.len() {
        return Err(Error::Shape(format!("{} scores but {} values", scores.len(), values.len())));
    }
    if bins == 0 || scores.len() < bins {
        return Err(Error::Config(format!("need at least {bins} tasks for {bins} bins")));
    }
    let mut order = rank_by_score(scores);
    order.reverse();
    let n = scores.len();
    Ok((0..bins)
        .map(|b| {
            let members = &order[b * n / bins..(b + 1) * n / bins];
            let s: Vec<f64> = members.iter().map(|&i| scores[i]).collect();
            HardnessBin {
                bin: b,
                count: members.len(),
                min_score: s.iter().copied().fold(f64::INFINITY, f64::min),
                max_score: s.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                mean: members.iter().map(|&i| values[i]).sum::<f64>() / members.len() as f64,
            }
        })
        .collect())
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        let avg = (start + end - 1) as f64 / 2.0 + 1.0;
        for &i in &idx[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation with a two-sided p-value from the t approximation.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::Config(format!(
            "Spearman correlation needs two equal-length samples of at least 3 (got {} and {})",
            x.len(),
            y.len()
        )));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok((0.0, 1.0));
    }
    let rho = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = n - 2.0;
    if rho.abs() == 1.0 {
        return Ok((rho, 0.0));
    }
    let t = rho * (df / (1.0 - rho * rho)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Config(e.to_string()))?;
    Ok((rho, 2.0 * (1.0 - dist.cdf(t.abs()))))
}
