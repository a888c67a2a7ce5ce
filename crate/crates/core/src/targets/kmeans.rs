use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Codebook, FeatureSequence};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 32,
            max_iters: 100,
            seed: 0,
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid (lowest index on ties) and its squared
/// distance.
pub fn nearest(row: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(row, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign_all(rows: &[f64], centroids: &[f64], dim: usize) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let labels = rows
        .chunks_exact(dim)
        .map(|r| {
            let (j, d) = nearest(r, centroids, dim);
            inertia += d;
            j
        })
        .collect();
    (labels, inertia)
}

/// Number of distinct rows (bitwise comparison).
pub fn count_distinct(rows: &[f64], dim: usize) -> usize {
    let mut keys: Vec<Vec<u64>> = rows
        .chunks_exact(dim)
        .map(|r| r.iter().map(|v| v.to_bits()).collect())
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

fn kmeans_pp(rows: &[f64], dim: usize, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let n = rows.len() / dim;
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(&rows[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = rows.chunks_exact(dim).map(|r| sq_dist(r, &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let mut u = rng.random_range(0.0..1.0) * total;
        let mut pick = n - 1;
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && u < d {
                pick = i;
                break;
            }
            u -= d;
        }
        // Rounding can leave `u` unspent; fall back to the last positive weight.
        if d2[pick] == 0.0 {
            pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(pick);
        }
        let c = rows[pick * dim..(pick + 1) * dim].to_vec();
        for (dv, r) in d2.iter_mut().zip(rows.chunks_exact(dim)) {
            *dv = dv.min(sq_dist(r, &c));
        }
        centroids.extend(c);
    }
    centroids
}

/// Lloyd iterations from the given centroids. Returns centroids and the
/// inertia measured after every assignment step.
pub fn lloyd(rows: &[f64], dim: usize, mut centroids: Vec<f64>, max_iters: usize) -> (Vec<f64>, Vec<f64>) {
    let k = centroids.len() / dim;
    let (mut labels, inertia) = assign_all(rows, &centroids, dim);
    let mut history = vec![inertia];
    for _ in 0..max_iters {
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (r, &l) in rows.chunks_exact(dim).zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(r) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                for d in 0..dim {
                    centroids[j * dim + d] = sums[j * dim + d] / counts[j] as f64;
                }
            } else {
                let old = centroids[j * dim..(j + 1) * dim].to_vec();
                let far = rows
                    .chunks_exact(dim)
                    .enumerate()
                    .fold((0, -1.0), |best, (i, r)| {
                        let d = sq_dist(r, &old);
                        if d > best.1 {
                            (i, d)
                        } else {
                            best
                        }
                    })
                    .0;
                centroids[j * dim..(j + 1) * dim].copy_from_slice(&rows[far * dim..(far + 1) * dim]);
            }
        }
        let (next, inertia) = assign_all(rows, &centroids, dim);
        history.push(inertia);
        if next == labels {
            break;
        }
        labels = next;
    }
    (centroids, history)
}

/// Row-stacks feature sequences into one `n × dim` buffer.
pub fn stack(features: &[FeatureSequence]) -> Result<(Vec<f64>, usize)> {
    let dim = features.first().map(|f| f.dim).unwrap_or(0);
    let mut rows = Vec::new();
    for f in features {
        if f.dim != dim {
            return Err(Error::Shape(format!("stack: feature dims {} and {}", dim, f.dim)));
        }
        rows.extend_from_slice(&f.data);
    }
    Ok((rows, dim))
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or `max_iters` is reached.
pub fn kmeans_fit(rows: &[f64], dim: usize, cfg: &KMeansConfig, source: &str) -> Result<Codebook> {
    if dim == 0 || !rows.len().is_multiple_of(dim) {
        return Err(Error::Shape(format!(
            "kmeans_fit: {} values do not form rows of {dim}",
            rows.len()
        )));
    }
    if cfg.k == 0 {
        return Err(Error::Config("k-means needs k >= 1".into()));
    }
    let distinct = count_distinct(rows, dim);
    if distinct < cfg.k {
        return Err(Error::invalid(format!(
            "k-means with k = {} needs at least that many distinct rows, found {distinct}",
            cfg.k
        )));
    }
    let mut r = rng::stream(cfg.seed, &[rng::tag("kmeans")]);
    let init = kmeans_pp(rows, dim, cfg.k, &mut r);
    let (centroids, history) = lloyd(rows, dim, init, cfg.max_iters);
    Ok(Codebook {
        centroids: Tensor::new(vec![cfg.k, dim], centroids)?,
        source: source.to_string(),
        seed: cfg.seed,
        inertia_history: history,
    })
}
