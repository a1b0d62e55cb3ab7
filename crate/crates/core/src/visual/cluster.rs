//! k-means over item features and popularity-aware reference selection.

use std::collections::BTreeMap;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};
use vispromo_nn::{blob, Param};

use crate::dataset::Catalog;
use crate::error::{Error, Result};
use crate::rng::stream;

pub const DEFAULT_K: usize = 10;
pub const MAX_ITERATIONS: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub seed: u64,
    pub centroids: Vec<Vec<f64>>,
    /// Cluster of each item, indexed like the feature rows.
    pub assignment: Vec<usize>,
    /// Within-cluster sum of squares after each Lloyd iteration.
    pub inertia_trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the closest centroid; ties go to the lowest index.
pub fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = sq_dist(point, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}

pub fn inertia(features: &[Vec<f64>], centroids: &[Vec<f64>], assignment: &[usize]) -> f64 {
    features.iter().zip(assignment).map(|(f, &c)| sq_dist(f, &centroids[c])).sum()
}

fn plus_plus_seed<R: Rng>(features: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centroids = vec![features[rng.random_range(0..features.len())].clone()];
    let mut d2: Vec<f64> = features.iter().map(|f| sq_dist(f, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = d2.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            chosen
        } else {
            rng.random_range(0..features.len())
        };
        centroids.push(features[pick].clone());
        for (f, d) in features.iter().zip(d2.iter_mut()) {
            *d = d.min(sq_dist(f, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

fn assign_all(features: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<usize> {
    features.iter().map(|f| nearest(f, centroids)).collect()
}

/// Moves the centroid of every empty cluster onto the point farthest from
/// its own centroid.
fn reseed_empty(features: &[Vec<f64>], centroids: &mut [Vec<f64>], assignment: &mut [usize]) {
    let k = centroids.len();
    loop {
        let mut counts = vec![0usize; k];
        for &a in assignment.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else { return };
        let far = (0..features.len())
            .filter(|&i| counts[assignment[i]] > 1)
            .max_by(|&a, &b| {
                let da = sq_dist(&features[a], &centroids[assignment[a]]);
                let db = sq_dist(&features[b], &centroids[assignment[b]]);
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("n >= k leaves a cluster with two members");
        centroids[empty] = features[far].clone();
        assignment[far] = empty;
    }
}

fn means(features: &[Vec<f64>], assignment: &[usize], old: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = features[0].len();
    let mut sums = vec![vec![0.0; dim]; old.len()];
    let mut counts = vec![0usize; old.len()];
    for (f, &a) in features.iter().zip(assignment) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(f) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .zip(old)
        .map(|((s, c), o)| if c == 0 { o.clone() } else { s.into_iter().map(|v| v / c as f64).collect() })
        .collect()
}

/// Lloyd's algorithm from k-means++ seeds, run to an assignment fixpoint or
/// [`MAX_ITERATIONS`].
pub fn fit_clusters(features: &[Vec<f64>], k: usize, seed: u64) -> Result<ClusterModel> {
    if k < 2 {
        return Err(Error::invalid("k-means needs k >= 2"));
    }
    if features.len() < k {
        return Err(Error::invalid(format!("k-means with k = {k} on {} points", features.len())));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Shape("ragged feature rows".into()));
    }
    let mut rng = stream(seed, "kmeans");
    let mut centroids = plus_plus_seed(features, k, &mut rng);
    let mut assignment = assign_all(features, &centroids);
    reseed_empty(features, &mut centroids, &mut assignment);
    let mut trace = vec![inertia(features, &centroids, &assignment)];
    for _ in 0..MAX_ITERATIONS {
        centroids = means(features, &assignment, &centroids);
        let mut next = assign_all(features, &centroids);
        reseed_empty(features, &mut centroids, &mut next);
        trace.push(inertia(features, &centroids, &next));
        if next == assignment {
            break;
        }
        assignment = next;
    }
    Ok(ClusterModel { k, seed, centroids, assignment, inertia_trace: trace })
}

#[derive(Debug, Serialize, Deserialize)]
struct ClusterDoc {
    k: usize,
    seed: u64,
    dim: usize,
    assignment: BTreeMap<String, usize>,
    inertia: f64,
}

impl ClusterModel {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == cluster).collect()
    }

    pub fn inertia(&self) -> f64 {
        self.inertia_trace.last().copied().unwrap_or(0.0)
    }

    /// JSON document (assignments keyed by item id) plus a blob of centroids.
    pub fn to_files(&self, item_ids: &[String]) -> Result<(String, Vec<u8>)> {
        if item_ids.len() != self.assignment.len() {
            return Err(Error::Shape("item id list does not match assignment".into()));
        }
        let dim = self.centroids.first().map_or(0, Vec::len);
        let doc = ClusterDoc {
            k: self.k,
            seed: self.seed,
            dim,
            assignment: item_ids.iter().cloned().zip(self.assignment.iter().copied()).collect(),
            inertia: self.inertia(),
        };
        let flat: Vec<f64> = self.centroids.iter().flatten().copied().collect();
        let p = Param::from_vec(&[self.k, dim], flat);
        Ok((serde_json::to_string_pretty(&doc)?, blob::encode(&[("centroids".to_string(), &p)])))
    }

    pub fn from_files(json: &str, centroid_blob: &[u8], item_ids: &[String]) -> Result<Self> {
        let doc: ClusterDoc = serde_json::from_str(json)?;
        if doc.k < 1 {
            return Err(Error::Format("cluster count must be positive".into()));
        }
        let arrays = blob::decode(centroid_blob)?;
        let arr = arrays
            .iter()
            .find(|a| a.name == "centroids")
            .ok_or_else(|| Error::Format("centroid blob lacks `centroids`".into()))?;
        if arr.shape != [doc.k, doc.dim] {
            return Err(Error::Format(format!("centroid shape {:?} != [{}, {}]", arr.shape, doc.k, doc.dim)));
        }
        if arr.data.iter().any(|v| !v.is_finite()) || !(doc.inertia.is_finite() && doc.inertia >= 0.0) {
            return Err(Error::Format("cluster files hold non-finite values".into()));
        }
        let centroids: Vec<Vec<f64>> = if doc.dim == 0 {
            vec![Vec::new(); doc.k]
        } else {
            arr.data.chunks(doc.dim).map(<[f64]>::to_vec).collect()
        };
        if doc.assignment.len() != item_ids.len() {
            return Err(Error::Format("assignment does not cover the catalog".into()));
        }
        let mut assignment = Vec::with_capacity(item_ids.len());
        for id in item_ids {
            let c = *doc.assignment.get(id).ok_or_else(|| Error::UnknownItem(id.clone()))?;
            if c >= doc.k {
                return Err(Error::Format(format!("item `{id}` assigned to cluster {c} of {}", doc.k)));
            }
            assignment.push(c);
        }
        Ok(Self { k: doc.k, seed: doc.seed, centroids, assignment, inertia_trace: vec![doc.inertia] })
    }
}

/// Most popular item other than `exclude`; ties go to the lowest id.
pub fn most_popular(popularity: &[usize], exclude: Option<usize>) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &p) in popularity.iter().enumerate() {
        if Some(i) == exclude {
            continue;
        }
        if best.is_none_or(|b| p > popularity[b]) {
            best = Some(i);
        }
    }
    best
}

/// Most popular other member of the target's cluster, or the globally most
/// popular item when the target is alone in its cluster.
pub fn select_reference(target: usize, clusters: &ClusterModel, catalog: &Catalog) -> Result<usize> {
    let pop = catalog.popularity();
    let cluster = *clusters
        .assignment
        .get(target)
        .ok_or_else(|| Error::UnknownItem(target.to_string()))?;
    let mut best: Option<usize> = None;
    for i in clusters.members(cluster) {
        if i != target && best.is_none_or(|b| pop[i] > pop[b]) {
            best = Some(i);
        }
    }
    match best {
        Some(b) => Ok(b),
        None => {
            warn!("item `{}` is alone in its cluster; using the globally most popular item", catalog.items()[target]);
            global_reference(target, catalog)
        }
    }
}

/// Reference selection without clustering.
pub fn global_reference(target: usize, catalog: &Catalog) -> Result<usize> {
    most_popular(catalog.popularity(), Some(target))
        .ok_or_else(|| Error::invalid("catalog has no item besides the target"))
}
