use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_finite, ClusterError, ClusterModel, ClusterParams};
use crate::embedstore::EmbeddingStore;
use crate::kernels::sq_dist;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Stop once no centroid moves further than this (Euclidean).
    pub tol: f64,
    /// Independent k-means++ restarts; the fit with the lowest
    /// within-cluster sum of squares is kept.
    pub n_init: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        KMeansParams {
            k: 10,
            seed: 0,
            max_iter: 300,
            tol: 1e-6,
            n_init: 1,
        }
    }
}

pub fn kmeans_fit(store: &EmbeddingStore, params: &KMeansParams) -> Result<ClusterModel, ClusterError> {
    let rows: Vec<usize> = (0..store.count()).collect();
    kmeans_fit_rows(&store.rows_f64(&rows), store.dim(), params)
}

/// Lloyd's algorithm with k-means++ seeding over a row-major `f64` matrix.
///
/// A cluster that empties during iteration is re-seeded with the point lying
/// farthest from its own centroid, so the model always has exactly `k`
/// non-empty clusters.
pub fn kmeans_fit_rows(
    data: &[f64],
    dim: usize,
    params: &KMeansParams,
) -> Result<ClusterModel, ClusterError> {
    if params.k == 0 {
        return Err(ClusterError::ZeroClusters);
    }
    if params.max_iter == 0 || params.n_init == 0 || !(params.tol >= 0.0) {
        return Err(ClusterError::InvalidParams(
            "max_iter and n_init must be positive and tol non-negative".into(),
        ));
    }
    if dim == 0 || data.len() % dim != 0 {
        return Err(ClusterError::InvalidParams("ragged input matrix".into()));
    }
    let n = data.len() / dim;
    if n < params.k {
        return Err(ClusterError::TooFewPoints {
            need: params.k,
            found: n,
        });
    }
    check_finite(data, dim)?;

    let mut best: Option<(f64, ClusterModel)> = None;
    for restart in 0..params.n_init {
        let model = fit_once(data, dim, params, restart as u64);
        let sse = inertia(data, dim, model.centers(), model.labels());
        if best.as_ref().is_none_or(|(b, _)| sse < *b) {
            best = Some((sse, model));
        }
    }
    Ok(best.expect("n_init >= 1").1)
}

fn inertia(data: &[f64], dim: usize, centers: &[f64], labels: &[usize]) -> f64 {
    data.chunks_exact(dim)
        .zip(labels)
        .map(|(x, &l)| sq_dist(x, &centers[l * dim..(l + 1) * dim]))
        .sum()
}

/// One Lloyd run; restart `r` seeds k-means++ from stream `r` of the seed.
fn fit_once(data: &[f64], dim: usize, params: &KMeansParams, restart: u64) -> ClusterModel {
    let k = params.k;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(restart);
    let mut centers = plus_plus_init(data, dim, k, &mut rng);

    let (mut labels, mut dists) = assign(data, dim, &centers);
    fix_empty(data, dim, k, &mut labels, &mut dists, &mut centers);
    let mut history = vec![dists.iter().sum::<f64>()];

    let mut converged = false;
    let mut iterations = 0;
    while iterations < params.max_iter {
        iterations += 1;
        let updated = means(data, dim, k, &labels);
        let shift = centers
            .chunks_exact(dim)
            .zip(updated.chunks_exact(dim))
            .map(|(a, b)| sq_dist(a, b))
            .fold(0.0f64, f64::max)
            .sqrt();
        centers = updated;
        let (mut next, mut next_dists) = assign(data, dim, &centers);
        fix_empty(data, dim, k, &mut next, &mut next_dists, &mut centers);
        history.push(next_dists.iter().sum::<f64>());
        let stable = next == labels;
        labels = next;
        if stable || shift <= params.tol {
            converged = true;
            break;
        }
    }
    let centers = means(data, dim, k, &labels);

    ClusterModel {
        params: ClusterParams::KMeans(params.clone()),
        dim,
        labels,
        centers,
        exemplar_rows: Vec::new(),
        iterations,
        converged,
        objective_history: history,
        preference: None,
    }
}

/// Greedy k-means++: each new center is the best of `2 + ln k` candidates
/// drawn proportionally to squared distance from the chosen centers.
fn plus_plus_init(data: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = data.len() / dim;
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let trials = 2 + (k as f64).ln().floor() as usize;

    let first = rng.random_range(0..n);
    let mut centers = row(first).to_vec();
    let mut closest: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| sq_dist(row(i), row(first)))
        .collect();
    let mut potential: f64 = closest.iter().sum();

    for _ in 1..k {
        let mut cumulative = Vec::with_capacity(n);
        let mut acc = 0.0;
        for &d in &closest {
            acc += d;
            cumulative.push(acc);
        }
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let candidate = if potential > 0.0 {
                let target = rng.random::<f64>() * acc;
                cumulative.partition_point(|&c| c <= target).min(n - 1)
            } else {
                rng.random_range(0..n)
            };
            let trial: Vec<f64> = (0..n)
                .into_par_iter()
                .map(|i| closest[i].min(sq_dist(row(i), row(candidate))))
                .collect();
            let pot: f64 = trial.iter().sum();
            if best.as_ref().is_none_or(|(b, _, _)| pot < *b) {
                best = Some((pot, candidate, trial));
            }
        }
        let (pot, chosen, trial) = best.expect("at least one trial");
        centers.extend_from_slice(row(chosen));
        closest = trial;
        potential = pot;
    }
    centers
}

/// Nearest center per row (lowest index on ties) and its squared distance.
fn assign(data: &[f64], dim: usize, centers: &[f64]) -> (Vec<usize>, Vec<f64>) {
    data.par_chunks_exact(dim)
        .map(|x| {
            let mut best = (0usize, f64::INFINITY);
            for (c, center) in centers.chunks_exact(dim).enumerate() {
                let d = sq_dist(x, center);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .unzip()
}

fn means(data: &[f64], dim: usize, k: usize, labels: &[usize]) -> Vec<f64> {
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (x, &l) in data.chunks_exact(dim).zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(x) {
            *s += v;
        }
    }
    for (c, &count) in counts.iter().enumerate() {
        if count > 0 {
            let inv = count as f64;
            sums[c * dim..(c + 1) * dim].iter_mut().for_each(|s| *s /= inv);
        }
    }
    sums
}

fn fix_empty(
    data: &[f64],
    dim: usize,
    k: usize,
    labels: &mut [usize],
    dists: &mut [f64],
    centers: &mut [f64],
) {
    let mut sizes = vec![0usize; k];
    for &l in labels.iter() {
        sizes[l] += 1;
    }
    for c in 0..k {
        if sizes[c] > 0 {
            continue;
        }
        let donor = (0..labels.len())
            .filter(|&i| sizes[labels[i]] > 1)
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if dists[b] >= dists[i] => Some(b),
                _ => Some(i),
            })
            .expect("n >= k guarantees a cluster with two members");
        sizes[labels[donor]] -= 1;
        sizes[c] = 1;
        labels[donor] = c;
        dists[donor] = 0.0;
        centers[c * dim..(c + 1) * dim].copy_from_slice(&data[donor * dim..(donor + 1) * dim]);
    }
}
