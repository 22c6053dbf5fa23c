use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_finite, ClusterError, ClusterModel, ClusterParams};
use crate::embedstore::EmbeddingStore;
use crate::kernels::sq_dist;

/// Self-similarity placed on the diagonal of the similarity matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Preference {
    Value(f64),
    Named(NamedPreference),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedPreference {
    /// Median of the off-diagonal similarities.
    Median,
}

impl Preference {
    pub const MEDIAN: Preference = Preference::Named(NamedPreference::Median);
}

impl Default for Preference {
    fn default() -> Self {
        Preference::MEDIAN
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApParams {
    pub damping: f64,
    pub max_iter: usize,
    /// Iterations with an unchanged exemplar set required to stop.
    pub convergence_iter: usize,
    pub preference: Preference,
    /// Seeds the tie-breaking noise added to the similarities.
    pub seed: u64,
    /// Largest row count accepted; bigger inputs must be sampled first.
    pub max_rows: usize,
}

impl Default for ApParams {
    fn default() -> Self {
        ApParams {
            damping: 0.5,
            max_iter: 1000,
            convergence_iter: 50,
            preference: Preference::MEDIAN,
            seed: 0,
            max_rows: 50_000,
        }
    }
}

pub fn ap_fit(store: &EmbeddingStore, params: &ApParams) -> Result<ClusterModel, ClusterError> {
    if store.count() > params.max_rows {
        return Err(ClusterError::TooManyRows {
            rows: store.count(),
            cap: params.max_rows,
        });
    }
    let rows: Vec<usize> = (0..store.count()).collect();
    ap_fit_rows(&store.rows_f64(&rows), store.dim(), params)
}

/// Affinity propagation on negative squared Euclidean similarities.
///
/// Responsibilities and availabilities are exchanged with damping until the
/// set of points whose `r(k,k) + a(k,k)` is positive stays unchanged for
/// `convergence_iter` iterations. Each point is then labeled with its most
/// similar exemplar.
pub fn ap_fit_rows(
    data: &[f64],
    dim: usize,
    params: &ApParams,
) -> Result<ClusterModel, ClusterError> {
    if !(0.5..1.0).contains(&params.damping) {
        return Err(ClusterError::InvalidParams(format!(
            "damping {} outside [0.5, 1)",
            params.damping
        )));
    }
    if params.max_iter == 0 || params.convergence_iter == 0 {
        return Err(ClusterError::InvalidParams(
            "max_iter and convergence_iter must be positive".into(),
        ));
    }
    if dim == 0 || data.len() % dim != 0 {
        return Err(ClusterError::InvalidParams("ragged input matrix".into()));
    }
    let n = data.len() / dim;
    if n < 2 {
        return Err(ClusterError::TooFewPoints { need: 2, found: n });
    }
    if n > params.max_rows {
        return Err(ClusterError::TooManyRows {
            rows: n,
            cap: params.max_rows,
        });
    }
    check_finite(data, dim)?;
    let row = |i: usize| &data[i * dim..(i + 1) * dim];

    // Degenerate input: every point identical.
    if (1..n).all(|i| row(i) == row(0)) {
        return Ok(ClusterModel {
            params: ClusterParams::AffinityPropagation(params.clone()),
            dim,
            labels: vec![0; n],
            centers: row(0).to_vec(),
            exemplar_rows: vec![0],
            iterations: 0,
            converged: true,
            objective_history: Vec::new(),
            preference: Some(0.0),
        });
    }

    let mut s: Vec<f64> = vec![0.0; n * n];
    s.par_chunks_exact_mut(n).enumerate().for_each(|(i, out)| {
        let xi = row(i);
        for (k, v) in out.iter_mut().enumerate() {
            if k != i {
                *v = -sq_dist(xi, row(k));
            }
        }
    });
    let preference = match params.preference {
        Preference::Value(p) => p,
        Preference::Named(NamedPreference::Median) => median_off_diagonal(&s, n),
    };
    for i in 0..n {
        s[i * n + i] = preference;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    for v in s.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v += (f64::EPSILON * *v + f64::MIN_POSITIVE * 100.0) * z;
    }

    let damping = params.damping;
    let mut r = vec![0.0f64; n * n];
    let mut a = vec![0.0f64; n * n];
    let mut col = vec![0.0f64; n];
    let mut exemplars: Vec<bool> = vec![false; n];
    let mut stable = 0usize;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < params.max_iter {
        iterations += 1;

        // Responsibilities, row by row.
        r.par_chunks_exact_mut(n)
            .zip(s.par_chunks_exact(n))
            .zip(a.par_chunks_exact(n))
            .for_each(|((r_row, s_row), a_row)| {
                let (mut first, mut second, mut arg) = (f64::NEG_INFINITY, f64::NEG_INFINITY, 0);
                for (k, (sv, av)) in s_row.iter().zip(a_row).enumerate() {
                    let v = sv + av;
                    if v > first {
                        second = first;
                        first = v;
                        arg = k;
                    } else if v > second {
                        second = v;
                    }
                }
                for (k, (rv, sv)) in r_row.iter_mut().zip(s_row).enumerate() {
                    let fresh = sv - if k == arg { second } else { first };
                    *rv = damping * *rv + (1.0 - damping) * fresh;
                }
            });

        // Column sums of positive responsibilities, diagonal kept as is.
        col.par_chunks_mut(256).enumerate().for_each(|(chunk, out)| {
            let k0 = chunk * 256;
            out.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..n {
                let r_row = &r[i * n + k0..i * n + k0 + out.len()];
                for (j, (acc, &rv)) in out.iter_mut().zip(r_row).enumerate() {
                    *acc += if i == k0 + j { rv } else { rv.max(0.0) };
                }
            }
        });

        // Availabilities.
        a.par_chunks_exact_mut(n)
            .zip(r.par_chunks_exact(n))
            .enumerate()
            .for_each(|(i, (a_row, r_row))| {
                for (k, (av, &rv)) in a_row.iter_mut().zip(r_row).enumerate() {
                    let fresh = if k == i {
                        col[k] - rv
                    } else {
                        (col[k] - rv.max(0.0)).min(0.0)
                    };
                    *av = damping * *av + (1.0 - damping) * fresh;
                }
            });

        let current: Vec<bool> = (0..n).map(|k| a[k * n + k] + r[k * n + k] > 0.0).collect();
        if current == exemplars {
            stable += 1;
        } else {
            exemplars = current;
            stable = 1;
        }
        if stable >= params.convergence_iter && exemplars.iter().any(|&e| e) {
            converged = true;
            break;
        }
    }

    let exemplar_rows: Vec<usize> = (0..n).filter(|&k| exemplars[k]).collect();
    if !converged {
        return Err(ClusterError::NotConverged {
            iterations,
            exemplars: exemplar_rows,
        });
    }

    let labels: Vec<usize> = (0..n)
        .into_par_iter()
        .map(|i| {
            if let Ok(own) = exemplar_rows.binary_search(&i) {
                return own;
            }
            let mut best = (0usize, f64::INFINITY);
            for (c, &e) in exemplar_rows.iter().enumerate() {
                let d = sq_dist(row(i), row(e));
                if d < best.1 {
                    best = (c, d);
                }
            }
            best.0
        })
        .collect();
    let centers = exemplar_rows.iter().flat_map(|&e| row(e).iter().copied()).collect();

    Ok(ClusterModel {
        params: ClusterParams::AffinityPropagation(params.clone()),
        dim,
        labels,
        centers,
        exemplar_rows,
        iterations,
        converged,
        objective_history: Vec::new(),
        preference: Some(preference),
    })
}

/// Median of the strictly off-diagonal entries; the mean of the two middle
/// values when their count is even.
fn median_off_diagonal(s: &[f64], n: usize) -> f64 {
    let mut values: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        values.extend_from_slice(&s[i * n + i + 1..(i + 1) * n]);
    }
    let m = values.len();
    let mid = m / 2;
    let (lower, upper, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if m % 2 == 1 {
        upper
    } else {
        let below = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (below + upper)
    }
}
