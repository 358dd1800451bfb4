//! k-means with k-means++ seeding, the silhouette coefficient, and
//! over-clustering based estimation of the number of clusters.

use std::collections::{BTreeMap, HashSet};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, validation, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after each Lloyd assignment step of the kept restart.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
}

impl ClusterAssignment {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k()];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansConfig {
            k,
            max_iter: 300,
            tol: 1e-6,
            restarts: 1,
            seed,
        }
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn check_rows(data: &[Vec<f64>]) -> Result<usize> {
    let dim = data.first().map_or(0, Vec::len);
    if data.iter().any(|r| r.len() != dim) {
        return Err(validation!("rows have inconsistent dimensions"));
    }
    if data.iter().flatten().any(|v| !v.is_finite()) {
        return Err(validation!("data has non-finite components"));
    }
    Ok(dim)
}

fn distinct_points(data: &[Vec<f64>]) -> usize {
    data.iter()
        .map(|r| r.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect::<HashSet<_>>()
        .len()
}

/// Lloyd's algorithm from k-means++ seeds. Runs `restarts` seeded restarts
/// and keeps the lowest inertia (earliest on ties).
pub fn kmeans(data: &[Vec<f64>], cfg: &KMeansConfig) -> Result<ClusterAssignment> {
    check_rows(data)?;
    if cfg.k == 0 {
        return Err(validation!("k must be positive"));
    }
    if cfg.max_iter == 0 || cfg.restarts == 0 {
        return Err(validation!("max_iter and restarts must be positive"));
    }
    let distinct = distinct_points(data);
    if cfg.k > distinct {
        return Err(validation!(
            "k = {} exceeds the {distinct} distinct points",
            cfg.k
        ));
    }
    let mut best: Option<ClusterAssignment> = None;
    for r in 0..cfg.restarts {
        let mut rng = rng::derive(cfg.seed, r as u64);
        let run = lloyd(data, cfg, &mut rng);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("restarts >= 1"))
}

fn kmeans_pp(data: &[Vec<f64>], k: usize, rng: &mut rng::GidRng) -> Vec<Vec<f64>> {
    let n = data.len();
    let mut centroids = vec![data[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = data.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            // only reachable with duplicate-heavy data; k <= distinct keeps
            // total > 0 until k centroids exist
            rng.random_range(0..n)
        };
        let c = data[idx].clone();
        for (w, p) in d2.iter_mut().zip(data) {
            *w = w.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn assign(data: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    data.par_iter()
        .map(|p| nearest(p, centroids))
        .unzip()
}

fn lloyd(data: &[Vec<f64>], cfg: &KMeansConfig, rng: &mut rng::GidRng) -> ClusterAssignment {
    let dim = data[0].len();
    let k = cfg.k;
    let mut centroids = kmeans_pp(data, k, rng);
    let mut trace = Vec::new();
    let mut iterations = 0;
    let (mut labels, mut dists) = assign(data, &centroids);
    loop {
        trace.push(dists.iter().sum());
        iterations += 1;

        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in data.iter().zip(&labels) {
            counts[l] += 1;
            sums[l].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        let mut next: Vec<Vec<f64>> = sums
            .into_iter()
            .zip(&counts)
            .enumerate()
            .map(|(j, (s, &c))| {
                if c == 0 {
                    centroids[j].clone()
                } else {
                    s.into_iter().map(|v| v / c as f64).collect()
                }
            })
            .collect();
        // empty cluster: move it onto the point worst served by its centroid
        let mut taken = HashSet::new();
        for j in (0..k).filter(|&j| counts[j] == 0) {
            let far = (0..data.len())
                .filter(|i| !taken.contains(i))
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
            if let Some(i) = far {
                taken.insert(i);
                next[j] = data[i].clone();
            }
        }

        let shift = centroids
            .iter()
            .zip(&next)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        (labels, dists) = assign(data, &centroids);
        if shift < cfg.tol || iterations >= cfg.max_iter {
            break;
        }
    }
    let inertia = dists.iter().sum();
    ClusterAssignment {
        labels,
        centroids,
        inertia,
        inertia_trace: trace,
        iterations,
    }
}

/// Mean silhouette coefficient with Euclidean distances. Samples in
/// singleton clusters contribute 0, as do samples with `a = b = 0`.
pub fn silhouette(data: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_rows(data)?;
    if data.len() != labels.len() {
        return Err(validation!(
            "{} points but {} labels",
            data.len(),
            labels.len()
        ));
    }
    // compact cluster ids so arbitrary label values work
    let mut ids: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        let next = ids.len();
        ids.entry(l).or_insert(next);
    }
    let k = ids.len();
    if k < 2 {
        return Err(validation!("silhouette needs at least 2 clusters, got {k}"));
    }
    let cl: Vec<usize> = labels.iter().map(|l| ids[l]).collect();
    let mut sizes = vec![0usize; k];
    for &c in &cl {
        sizes[c] += 1;
    }
    let per_sample: Vec<f64> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let own = cl[i];
            if sizes[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0f64; k];
            for (j, p) in data.iter().enumerate() {
                if j != i {
                    sums[cl[j]] += sq_dist(&data[i], p).sqrt();
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m > 0.0 {
                (b - a) / m
            } else {
                0.0
            }
        })
        .collect();
    Ok(per_sample.iter().sum::<f64>() / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KEstimateConfig {
    /// Deliberately large initial cluster count.
    pub k_prime: usize,
    /// Minimum size of a kept cluster; `None` means the mean size n / k_prime.
    pub threshold: Option<f64>,
    /// k-means restarts for the over-clustering; the lowest inertia wins.
    pub restarts: usize,
}

impl KEstimateConfig {
    pub fn new(k_prime: usize) -> Self {
        KEstimateConfig {
            k_prime,
            threshold: None,
            restarts: 10,
        }
    }
}

/// Over-cluster with `k_prime` clusters and count those at least as large
/// as the threshold.
pub fn estimate_k(data: &[Vec<f64>], cfg: &KEstimateConfig, seed: u64) -> Result<usize> {
    if cfg.k_prime == 0 {
        return Err(config_err!("k_prime must be at least 1"));
    }
    if data.is_empty() {
        return Err(validation!("cannot estimate K on empty data"));
    }
    let t = cfg
        .threshold
        .unwrap_or(data.len() as f64 / cfg.k_prime as f64);
    if t.is_nan() || t <= 0.0 {
        return Err(config_err!("threshold must be positive, got {t}"));
    }
    let fit = kmeans(
        data,
        &KMeansConfig {
            restarts: cfg.restarts,
            ..KMeansConfig::new(cfg.k_prime, seed)
        },
    )?;
    Ok(fit.sizes().into_iter().filter(|&s| s as f64 >= t).count())
}
