//! Semantic change quantities over time slices of an embedding store.
//!
//! Dominant-meaning shift is measured form-based with [`prt`] (inverted
//! cosine similarity of yearly prototypes) and sense-based with [`jsd`] over
//! cluster distributions. Polysemy is measured with [`entropy_normalized`]
//! over a cluster distribution and with [`aid`], the aggregated pairwise
//! Euclidean distance within one year.
//!
//! All arithmetic runs in `f64` over the `f32` stored vectors.

mod series;

pub use series::{compute_series, per_year_entropy_series, Metric, MetricName, MetricSeries, SeriesPoint};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::ClusterModel;
use crate::embedstore::{EmbeddingStore, TimeSlice};
use crate::kernels;

/// Tolerance on the unit sum of a probability vector.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("time slice for year {0} is empty")]
    EmptySlice(i32),
    #[error("need at least {need} embeddings, found {found}")]
    TooFewEmbeddings { need: usize, found: usize },
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("cosine similarity {0} is not positive; inverted similarity undefined")]
    NonPositiveSimilarity(f64),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("metric {0} requires a cluster model")]
    MissingModel(MetricName),
    #[error("cluster model does not match store: {0}")]
    ModelMismatch(String),
}

/// Mean embedding of one year.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub year: i32,
    pub vector: Vec<f64>,
    pub support: usize,
}

/// Share of a year's embeddings in each cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterDistribution {
    pub year: i32,
    pub probs: Vec<f64>,
    pub support: usize,
}

impl ClusterDistribution {
    /// Checks non-negativity and unit sum.
    pub fn from_probs(year: i32, probs: Vec<f64>, support: usize) -> Result<Self, MetricError> {
        validate_probs(&probs)?;
        Ok(ClusterDistribution {
            year,
            probs,
            support,
        })
    }
}

fn validate_probs(probs: &[f64]) -> Result<(), MetricError> {
    if probs.is_empty() {
        return Err(MetricError::InvalidDistribution("no clusters".into()));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(MetricError::InvalidDistribution(
            "negative or non-finite probability".into(),
        ));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE * probs.len().max(1) as f64 {
        return Err(MetricError::InvalidDistribution(format!("sums to {sum}")));
    }
    Ok(())
}

/// How the pair-distance sum of [`aid`] is normalized.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AidMode {
    /// Pair sum divided by the number of embeddings.
    #[default]
    Paper,
    /// Pair sum divided by the number of pairs: the mean pairwise distance,
    /// which does not grow with slice size.
    PairMean,
}

impl AidMode {
    pub fn tag(self) -> &'static str {
        match self {
            AidMode::Paper => "paper",
            AidMode::PairMean => "pair_mean",
        }
    }
}

/// Component-wise mean of the slice's vectors.
pub fn prototype(store: &EmbeddingStore, slice: &TimeSlice) -> Result<Prototype, MetricError> {
    if slice.is_empty() {
        return Err(MetricError::EmptySlice(slice.year));
    }
    let mut sum = vec![0.0f64; store.dim()];
    for &row in &slice.indices {
        for (s, &v) in sum.iter_mut().zip(store.row(row)) {
            *s += f64::from(v);
        }
    }
    let n = slice.len() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    Ok(Prototype {
        year: slice.year,
        vector: sum,
        support: slice.len(),
    })
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    let na = kernels::dot(a, a);
    let nb = kernels::dot(b, b);
    if na == 0.0 || nb == 0.0 {
        return Err(MetricError::ZeroNorm);
    }
    Ok((kernels::dot(a, b) / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// Inverted cosine similarity of two vectors; 1 for identical directions,
/// larger for bigger shifts.
pub fn prt_vectors(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    let cs = cosine_similarity(a, b)?;
    if cs <= 0.0 {
        return Err(MetricError::NonPositiveSimilarity(cs));
    }
    Ok(1.0 / cs)
}

pub fn prt(a: &Prototype, b: &Prototype) -> Result<f64, MetricError> {
    prt_vectors(&a.vector, &b.vector)
}

/// Share of the slice's rows in each of the model's clusters.
pub fn cluster_distribution(
    model: &ClusterModel,
    slice: &TimeSlice,
) -> Result<ClusterDistribution, MetricError> {
    if slice.is_empty() {
        return Err(MetricError::EmptySlice(slice.year));
    }
    let labels = model.labels();
    let mut counts = vec![0usize; model.n_clusters()];
    for &row in &slice.indices {
        let label = *labels.get(row).ok_or_else(|| {
            MetricError::ModelMismatch(format!("row {row} has no label"))
        })?;
        counts[label] += 1;
    }
    let n = slice.len() as f64;
    Ok(ClusterDistribution {
        year: slice.year,
        probs: counts.iter().map(|&c| c as f64 / n).collect(),
        support: slice.len(),
    })
}

/// Shannon entropy in nats with `0 log 0 = 0`.
pub fn shannon_entropy(probs: &[f64]) -> f64 {
    let h: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    h.max(0.0)
}

fn normalized_entropy_of(probs: &[f64]) -> f64 {
    if probs.len() < 2 {
        return 0.0;
    }
    (shannon_entropy(probs) / (probs.len() as f64).ln()).clamp(0.0, 1.0)
}

/// Entropy divided by `log N`, in `[0, 1]`. A single cluster gives 0.
pub fn entropy_normalized(dist: &ClusterDistribution) -> Result<f64, MetricError> {
    validate_probs(&dist.probs)?;
    Ok(normalized_entropy_of(&dist.probs))
}

/// Jensen-Shannon divergence on normalized entropy:
/// `eta((P + Q) / 2) - (eta(P) + eta(Q)) / 2`.
pub fn jsd(p: &ClusterDistribution, q: &ClusterDistribution) -> Result<f64, MetricError> {
    jsd_probs(&p.probs, &q.probs)
}

pub fn jsd_probs(p: &[f64], q: &[f64]) -> Result<f64, MetricError> {
    if p.len() != q.len() {
        return Err(MetricError::LengthMismatch(p.len(), q.len()));
    }
    validate_probs(p)?;
    validate_probs(q)?;
    let mixture: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let value = normalized_entropy_of(&mixture)
        - 0.5 * (normalized_entropy_of(p) + normalized_entropy_of(q));
    // Rounding can push a near-zero divergence just below 0.
    Ok(value.clamp(0.0, 1.0))
}

/// Sum of pairwise Euclidean distances of a slice, normalized per `mode`.
pub fn aid(store: &EmbeddingStore, slice: &TimeSlice, mode: AidMode) -> Result<f64, MetricError> {
    let n = slice.len();
    if n < 2 {
        return Err(MetricError::TooFewEmbeddings { need: 2, found: n });
    }
    let data = store.rows_f64(&slice.indices);
    let total = kernels::pairwise_distance_sum(&data, store.dim());
    let nf = n as f64;
    Ok(match mode {
        AidMode::Paper => total / nf,
        AidMode::PairMean => total / (nf * (nf - 1.0) / 2.0),
    })
}
