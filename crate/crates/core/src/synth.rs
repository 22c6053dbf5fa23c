//! Gaussian-mixture embedding corpora with known sense structure and drift
//! events, used to validate the metrics end to end.
//!
//! Geometry (sense centers, drift magnitudes, center radius) is expressed in
//! units of the noise scale `sigma`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedstore::{EmbeddingRecord, EmbeddingStore, StoreError, MAX_YEAR, MIN_YEAR};

const WEIGHT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    Invalid(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Mixture weight of one sense, either fixed or given per year.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightSchedule {
    Constant(f64),
    PerYear(Vec<f64>),
}

impl WeightSchedule {
    fn at(&self, year_index: usize) -> f64 {
        match self {
            WeightSchedule::Constant(w) => *w,
            WeightSchedule::PerYear(ws) => ws[year_index],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SenseSpec {
    /// Seeds a random center direction when `center` is absent.
    #[serde(default)]
    pub seed: u64,
    /// Explicit center, in sigma units.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<Vec<f64>>,
    pub weights: WeightSchedule,
}

/// From `year` on, every sense center moves by `magnitude` sigmas along a
/// seeded direction orthogonal to all sense centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftEvent {
    pub year: i32,
    pub magnitude: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub first_year: i32,
    pub last_year: i32,
    pub per_year: usize,
    pub dim: usize,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Norm of seeded sense centers, in sigma units.
    #[serde(default = "default_radius")]
    pub center_radius: f64,
    pub senses: Vec<SenseSpec>,
    #[serde(default)]
    pub drifts: Vec<DriftEvent>,
    #[serde(default = "default_journal")]
    pub journal: String,
    #[serde(default = "default_token")]
    pub token: String,
}

fn default_sigma() -> f64 {
    1.0
}
fn default_radius() -> f64 {
    10.0
}
fn default_journal() -> String {
    "SYN".into()
}
fn default_token() -> String {
    "virtual".into()
}

impl SynthSpec {
    /// One sense at a seeded center with a single displacement at `drift_year`.
    pub fn single_sense_drift(
        years: (i32, i32),
        per_year: usize,
        dim: usize,
        drift_year: i32,
        magnitude: f64,
    ) -> Self {
        SynthSpec {
            first_year: years.0,
            last_year: years.1,
            per_year,
            dim,
            sigma: 1.0,
            center_radius: default_radius(),
            senses: vec![SenseSpec {
                seed: 1,
                center: None,
                weights: WeightSchedule::Constant(1.0),
            }],
            drifts: vec![DriftEvent {
                year: drift_year,
                magnitude,
                seed: 2,
            }],
            journal: default_journal(),
            token: default_token(),
        }
    }

    /// Year `i` (0-based) mixes senses `0..=i` with equal weights. Sense `k`
    /// sits at `separation / sqrt(2)` on axis `k`, so every pair of centers is
    /// `separation` sigmas apart.
    pub fn growing_polysemy(first_year: i32, years: usize, per_year: usize, dim: usize, separation: f64) -> Self {
        let offset = separation / std::f64::consts::SQRT_2;
        let senses = (0..years)
            .map(|k| {
                let mut center = vec![0.0; dim];
                if k < dim {
                    center[k] = offset;
                }
                SenseSpec {
                    seed: k as u64,
                    center: Some(center),
                    weights: WeightSchedule::PerYear(
                        (0..years)
                            .map(|y| if k <= y { 1.0 / (y + 1) as f64 } else { 0.0 })
                            .collect(),
                    ),
                }
            })
            .collect();
        SynthSpec {
            first_year,
            last_year: first_year + years as i32 - 1,
            per_year,
            dim,
            sigma: 1.0,
            center_radius: default_radius(),
            senses,
            drifts: Vec::new(),
            journal: default_journal(),
            token: default_token(),
        }
    }

    pub fn n_years(&self) -> usize {
        (self.last_year - self.first_year + 1).max(0) as usize
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Invalid(m));
        if self.first_year > self.last_year
            || self.first_year < MIN_YEAR
            || self.last_year > MAX_YEAR
        {
            return bad(format!("year range {}..={}", self.first_year, self.last_year));
        }
        if self.dim < 2 {
            return bad("dim must be at least 2".into());
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be positive".into());
        }
        if self.senses.is_empty() {
            return bad("at least one sense required".into());
        }
        let years = self.n_years();
        for (k, sense) in self.senses.iter().enumerate() {
            if let Some(c) = &sense.center {
                if c.len() != self.dim || c.iter().any(|v| !v.is_finite()) {
                    return bad(format!("sense {k} center must have {} finite values", self.dim));
                }
            }
            match &sense.weights {
                WeightSchedule::PerYear(ws) if ws.len() != years => {
                    return bad(format!("sense {k} has {} weights for {years} years", ws.len()))
                }
                WeightSchedule::PerYear(ws) if ws.iter().any(|w| !(*w >= 0.0)) => {
                    return bad(format!("sense {k} has a negative weight"))
                }
                WeightSchedule::Constant(w) if !(*w >= 0.0) => {
                    return bad(format!("sense {k} has a negative weight"))
                }
                _ => {}
            }
        }
        for y in 0..years {
            let total: f64 = self.senses.iter().map(|s| s.weights.at(y)).sum();
            if (total - 1.0).abs() > WEIGHT_TOLERANCE {
                return bad(format!("weights of year {} sum to {total}", self.first_year + y as i32));
            }
        }
        for d in &self.drifts {
            if !d.magnitude.is_finite() {
                return bad("drift magnitude must be finite".into());
            }
        }
        Ok(())
    }
}

/// Known structure of a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Generating sense of every row.
    pub labels: Vec<usize>,
    pub events: Vec<DriftEvent>,
    /// Sense centers before any drift, in absolute units.
    pub centers: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub store: EmbeddingStore,
    pub truth: GroundTruth,
}

/// Splits `total` into integer counts proportional to `weights` (largest
/// remainder, lower index first on ties).
fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().take(total.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Removes the components of `v` along `basis` (Gram-Schmidt) and
/// renormalizes. Returns `v` unchanged when nothing is left.
fn orthogonalize(v: Vec<f64>, basis: &[Vec<f64>]) -> Vec<f64> {
    let mut ortho: Vec<Vec<f64>> = Vec::new();
    for b in basis {
        let mut u = b.clone();
        for o in &ortho {
            let p: f64 = u.iter().zip(o).map(|(a, b)| a * b).sum();
            u.iter_mut().zip(o).for_each(|(a, b)| *a -= p * b);
        }
        let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            ortho.push(u.into_iter().map(|x| x / n).collect());
        }
    }
    let mut w = v.clone();
    for o in &ortho {
        let p: f64 = w.iter().zip(o).map(|(a, b)| a * b).sum();
        w.iter_mut().zip(o).for_each(|(a, b)| *a -= p * b);
    }
    let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 1e-9 {
        w.into_iter().map(|x| x / n).collect()
    } else {
        v
    }
}

pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<SynthCorpus, SynthError> {
    spec.validate()?;
    let dim = spec.dim;
    let sigma = spec.sigma;

    let centers: Vec<Vec<f64>> = spec
        .senses
        .iter()
        .map(|s| match &s.center {
            Some(c) => c.iter().map(|v| v * sigma).collect(),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
                unit_gaussian(&mut rng, dim)
                    .into_iter()
                    .map(|v| v * spec.center_radius * sigma)
                    .collect()
            }
        })
        .collect();
    let drift_vectors: Vec<(i32, Vec<f64>)> = spec
        .drifts
        .iter()
        .map(|d| {
            let mut rng = ChaCha8Rng::seed_from_u64(d.seed);
            let dir = orthogonalize(unit_gaussian(&mut rng, dim), &centers);
            (d.year, dir.into_iter().map(|v| v * d.magnitude * sigma).collect())
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(spec.n_years() * spec.per_year * dim);
    let mut records = Vec::with_capacity(spec.n_years() * spec.per_year);
    let mut labels = Vec::with_capacity(records.capacity());
    for (yi, year) in (spec.first_year..=spec.last_year).enumerate() {
        let mut offset = vec![0.0; dim];
        for (_, v) in drift_vectors.iter().filter(|(y, _)| *y <= year) {
            offset.iter_mut().zip(v).for_each(|(o, d)| *o += d);
        }
        let weights: Vec<f64> = spec.senses.iter().map(|s| s.weights.at(yi)).collect();
        let mut i = 0;
        for (k, &count) in apportion(&weights, spec.per_year).iter().enumerate() {
            for _ in 0..count {
                for d in 0..dim {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push((centers[k][d] + offset[d] + sigma * z) as f32);
                }
                records.push(EmbeddingRecord {
                    occurrence_id: records.len() as u64,
                    doc_id: format!("syn-{year}-{i}"),
                    year,
                    journal: spec.journal.clone(),
                    token: spec.token.clone(),
                    row: records.len(),
                });
                labels.push(k);
                i += 1;
            }
        }
    }
    let store = EmbeddingStore::new(dim, data, records)?;
    Ok(SynthCorpus {
        store,
        truth: GroundTruth {
            labels,
            events: spec.drifts.clone(),
            centers,
        },
    })
}
