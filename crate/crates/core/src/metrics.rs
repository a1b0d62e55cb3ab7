//! Ranking metrics, Fréchet distance between feature sets, and report
//! arithmetic.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::{Catalog, Split};
use crate::error::{Error, Result};

/// Diagonal shrinkage added to both covariances.
pub const FID_SHRINKAGE: f64 = 1e-6;

/// Per-user ranked item lists (best first), already stripped of excluded
/// items. Lists may be truncated to the largest K of interest.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RankingTable {
    pub lists: Vec<Vec<usize>>,
}

impl RankingTable {
    pub fn new(lists: Vec<Vec<usize>>) -> Self {
        Self { lists }
    }

    pub fn num_users(&self) -> usize {
        self.lists.len()
    }

    fn in_top(&self, user: usize, item: usize, k: usize) -> bool {
        self.lists[user].iter().take(k).any(|&i| i == item)
    }
}

/// Mean over targets of the fraction of all users whose top-K holds it.
pub fn exposure_rate(rankings: &RankingTable, targets: &[usize], k: usize) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::invalid("exposure rate needs at least one target"));
    }
    let n = rankings.num_users();
    if n == 0 {
        return Err(Error::invalid("exposure rate needs at least one user"));
    }
    let mut hits = vec![0usize; targets.len()];
    let pos: BTreeMap<usize, usize> = targets.iter().enumerate().map(|(p, &t)| (t, p)).collect();
    for list in &rankings.lists {
        for &i in list.iter().take(k) {
            if let Some(&p) = pos.get(&i) {
                hits[p] += 1;
            }
        }
    }
    // duplicates in `targets` share the same count
    let total: usize = targets.iter().map(|t| hits[pos[t]]).sum();
    Ok(total as f64 / (targets.len() * n) as f64)
}

/// Variant whose denominator only counts users who have not already
/// interacted with the target in training or validation.
pub fn exposure_rate_eligible(rankings: &RankingTable, targets: &[usize], k: usize, split: &Split) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::invalid("exposure rate needs at least one target"));
    }
    let mut sum = 0.0;
    for &t in targets {
        let eligible: Vec<usize> = (0..rankings.num_users())
            .filter(|&u| split.valid[u] != t && !split.train[u].contains(&t))
            .collect();
        if eligible.is_empty() {
            continue;
        }
        let hit = eligible.iter().filter(|&&u| rankings.in_top(u, t, k)).count();
        sum += hit as f64 / eligible.len() as f64;
    }
    Ok(sum / targets.len() as f64)
}

/// Mean over users of `1/log2(rank + 1)` for the held-out item, 0 beyond K.
pub fn ndcg_at_k(rankings: &RankingTable, test_items: &[usize], k: usize) -> Result<f64> {
    if test_items.len() != rankings.num_users() {
        return Err(Error::Shape(format!("{} test items for {} users", test_items.len(), rankings.num_users())));
    }
    if test_items.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = rankings
        .lists
        .iter()
        .zip(test_items)
        .map(|(list, &t)| match list.iter().take(k).position(|&i| i == t) {
            Some(p) => 1.0 / ((p + 2) as f64).log2(),
            None => 0.0,
        })
        .sum();
    Ok(total / test_items.len() as f64)
}

fn moments(rows: &[Vec<f64>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.len();
    let x = DMatrix::from_fn(n, dim, |r, c| rows[r][c]);
    let mean = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, dim, |r, c| x[(r, c)] - mean[c]);
    let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
    for d in 0..dim {
        cov[(d, d)] += FID_SHRINKAGE;
    }
    (mean, cov)
}

fn sym_eigenvalues(m: DMatrix<f64>) -> DVector<f64> {
    let sym = (&m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets (rows are
/// samples).
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let dim = a.first().map_or(0, Vec::len);
    if dim == 0 || b.first().map_or(0, Vec::len) != dim {
        return Err(Error::Shape("feature sets must be nonempty with equal width".into()));
    }
    if a.iter().chain(b).any(|r| r.len() != dim) {
        return Err(Error::Shape("ragged feature rows".into()));
    }
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("each feature set needs at least two rows"));
    }
    if a.len() <= dim || b.len() <= dim {
        warn!("fid on {} and {} rows of width {dim}: covariance is singular, relying on shrinkage", a.len(), b.len());
    }
    let (ma, ca) = moments(a, dim);
    let (mb, cb) = moments(b, dim);
    let s = sym_sqrt(&ca);
    let inner = &s * &cb * &s;
    let eig = sym_eigenvalues(inner);
    let largest = eig.iter().cloned().fold(0.0f64, f64::max);
    let most_negative = eig.iter().cloned().fold(0.0f64, f64::min);
    if most_negative < -1e-6 * largest.max(1.0) {
        warn!("fid: clipped eigenvalue {most_negative:e} of the covariance product");
    }
    let tr_sqrt: f64 = eig.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d = (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

/// Percentage change from `before` to `after`. With `lower_is_better` the
/// sign flips so that a drop counts as an improvement.
pub fn improvement(before: f64, after: f64, lower_is_better: bool) -> Result<f64> {
    if before == 0.0 {
        return Err(Error::invalid("improvement is undefined for a zero baseline"));
    }
    let delta = if lower_is_better { before - after } else { after - before };
    Ok(delta / before * 100.0)
}

pub fn sparsity(users: usize, items: usize, interactions: usize) -> Result<f64> {
    if users == 0 || items == 0 {
        return Err(Error::invalid("sparsity of an empty catalog"));
    }
    Ok((1.0 - interactions as f64 / (users as f64 * items as f64)) * 100.0)
}

pub fn catalog_sparsity(catalog: &Catalog) -> Result<f64> {
    sparsity(catalog.num_users(), catalog.num_items(), catalog.interactions().len())
}

/// One (model, attack, K) cell of the evaluation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub model: String,
    pub attack: String,
    pub k: usize,
    pub er: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub cells: Vec<MetricCell>,
    /// attack → FID of its adversarial target images against the originals.
    pub fid: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn cell(&self, model: &str, attack: &str, k: usize) -> Option<&MetricCell> {
        self.cells.iter().find(|c| c.model == model && c.attack == attack && c.k == k)
    }

    pub fn validate(&self) -> Result<()> {
        for c in &self.cells {
            if !(0.0..=1.0).contains(&c.er) || !(0.0..=1.0).contains(&c.ndcg) {
                return Err(Error::Format(format!("metric out of [0,1] for {}/{}/{}", c.model, c.attack, c.k)));
            }
        }
        if self.fid.values().any(|v| !(*v >= 0.0)) {
            return Err(Error::Format("negative or NaN FID".into()));
        }
        Ok(())
    }
}
