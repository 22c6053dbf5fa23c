//! Significance testing, correlation and smoothing of metric series.

use std::collections::BTreeMap;
use std::io::{self, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedstore::{EmbeddingStore, TimeSlice};
use crate::metrics::{prt_vectors, MetricError, MetricSeries, SeriesPoint};

/// Default reporting threshold for adjusted p-values.
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

/// Relative slack when comparing a permuted statistic with the observed one,
/// so rounding noise on exact ties counts as "at least as extreme".
const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("slice for year {year} has {found} embeddings; at least 2 required")]
    DegenerateSlice { year: i32, found: usize },
    #[error("permutation budget must be positive")]
    NoPermutations,
    #[error("p-value {0} outside (0, 1]")]
    PValueOutOfRange(f64),
    #[error("need at least 2 paired values, found {0}")]
    TooShort(usize),
    #[error("series {0} has zero variance")]
    ZeroVariance(&'static str),
    #[error("window must be odd and positive, got {0}")]
    BadWindow(usize),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PermutationParams {
    pub r_max: usize,
    /// Optional tighter cap on the permutations actually run.
    pub budget: Option<usize>,
    pub seed: u64,
}

impl Default for PermutationParams {
    fn default() -> Self {
        PermutationParams {
            r_max: 100_000,
            budget: None,
            seed: 0,
        }
    }
}

impl PermutationParams {
    pub fn permutations(&self) -> usize {
        self.budget.map_or(self.r_max, |b| b.min(self.r_max))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub year_pair: (i32, i32),
    pub observed: f64,
    pub r: usize,
    pub count_ge: usize,
    pub p_raw: f64,
    pub p_adj: Option<f64>,
}

/// One-sided permutation test of the inverted prototype similarity between
/// two slices.
///
/// Each permutation pools both slices and re-partitions them at their original
/// sizes. Permutation `i` draws from a ChaCha stream keyed by `(seed, i)`, so
/// the outcome does not depend on scheduling. Permutations whose statistic is
/// undefined count as at least as extreme. `p_raw = (count_ge + 1) / (r + 1)`.
pub fn permutation_test_prt(
    store: &EmbeddingStore,
    first: &TimeSlice,
    second: &TimeSlice,
    params: &PermutationParams,
) -> Result<PermutationResult, StatsError> {
    for s in [first, second] {
        if s.len() < 2 {
            return Err(StatsError::DegenerateSlice {
                year: s.year,
                found: s.len(),
            });
        }
    }
    let r = params.permutations();
    if r == 0 {
        return Err(StatsError::NoPermutations);
    }
    let dim = store.dim();
    let n1 = first.len();
    let pooled_rows: Vec<usize> = first.indices.iter().chain(&second.indices).copied().collect();
    let pooled = store.rows_f64(&pooled_rows);
    let total = pooled_rows.len();

    let split_statistic = |in_first: &[bool]| -> Result<f64, MetricError> {
        let mut a = vec![0.0f64; dim];
        let mut b = vec![0.0f64; dim];
        for (x, &is_first) in pooled.chunks_exact(dim).zip(in_first) {
            let target = if is_first { &mut a } else { &mut b };
            for (t, v) in target.iter_mut().zip(x) {
                *t += v;
            }
        }
        let (na, nb) = (n1 as f64, (total - n1) as f64);
        a.iter_mut().for_each(|v| *v /= na);
        b.iter_mut().for_each(|v| *v /= nb);
        prt_vectors(&a, &b)
    };

    let truth: Vec<bool> = (0..total).map(|i| i < n1).collect();
    let observed = split_statistic(&truth)?;
    let threshold = observed * (1.0 - TIE_TOLERANCE);

    let count_ge = (0..r)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(i as u64);
            let mut in_first = vec![false; total];
            for j in rand::seq::index::sample(&mut rng, total, n1) {
                in_first[j] = true;
            }
            match split_statistic(&in_first) {
                Ok(v) => usize::from(v >= threshold),
                Err(_) => 1,
            }
        })
        .sum::<usize>();

    Ok(PermutationResult {
        year_pair: (first.year, second.year),
        observed,
        r,
        count_ge,
        p_raw: (count_ge as f64 + 1.0) / (r as f64 + 1.0),
        p_adj: None,
    })
}

/// Tests every pair of consecutive populated years and fills `p_adj` with
/// Benjamini-Hochberg adjusted values across all pairs.
pub fn permutation_series(
    store: &EmbeddingStore,
    params: &PermutationParams,
    year_range: Option<(i32, i32)>,
) -> Result<Vec<PermutationResult>, StatsError> {
    let slices: Vec<TimeSlice> = store
        .slices()
        .into_iter()
        .filter(|s| year_range.is_none_or(|(lo, hi)| (lo..=hi).contains(&s.year)))
        .filter(|s| s.len() >= 2)
        .collect();
    let mut results = Vec::with_capacity(slices.len().saturating_sub(1));
    for pair in slices.windows(2) {
        let pair_params = PermutationParams {
            seed: pair_seed(params.seed, pair[0].year, pair[1].year),
            ..*params
        };
        results.push(permutation_test_prt(store, &pair[0], &pair[1], &pair_params)?);
    }
    if !results.is_empty() {
        let raw: Vec<f64> = results.iter().map(|r| r.p_raw).collect();
        for (res, adj) in results.iter_mut().zip(bh_adjust(&raw)?) {
            res.p_adj = Some(adj);
        }
    }
    Ok(results)
}

/// SplitMix64-style mixing of the root seed with a year pair.
fn pair_seed(seed: u64, a: i32, b: i32) -> u64 {
    let mut z = seed ^ ((a as u64) << 32 | (b as u32 as u64));
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn write_permutation_csv<W: Write>(results: &[PermutationResult], mut w: W) -> io::Result<()> {
    writeln!(w, "year_pair,observed,r,p_raw,p_adj")?;
    for res in results {
        let adj = res.p_adj.map(|p| p.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{}-{},{},{},{},{}",
            res.year_pair.0, res.year_pair.1, res.observed, res.r, res.p_raw, adj
        )?;
    }
    Ok(())
}

/// Benjamini-Hochberg step-up adjustment, returned in input order.
pub fn bh_adjust(p_values: &[f64]) -> Result<Vec<f64>, StatsError> {
    if let Some(&bad) = p_values.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
        return Err(StatsError::PValueOutOfRange(bad));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]).then(a.cmp(&b)));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank0, &idx) in order.iter().enumerate().rev() {
        let candidate = (p_values[idx] * m as f64 / (rank0 + 1) as f64).max(p_values[idx]);
        running = running.min(candidate);
        adjusted[idx] = running;
    }
    Ok(adjusted)
}

/// Sample Pearson correlation of two equally long value lists.
pub fn pearson_values(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    let n = x.len().min(y.len());
    if x.len() != y.len() || n < 2 {
        return Err(StatsError::TooShort(n));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(StatsError::ZeroVariance("x"));
    }
    if syy == 0.0 {
        return Err(StatsError::ZeroVariance("y"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation over the points two series share (matched on year and,
/// for pairwise series, the preceding year).
pub fn pearson(x: &MetricSeries, y: &MetricSeries) -> Result<f64, StatsError> {
    let (a, b) = inner_join(x, y);
    pearson_values(&a, &b)
}

pub fn inner_join(x: &MetricSeries, y: &MetricSeries) -> (Vec<f64>, Vec<f64>) {
    let lookup: BTreeMap<(Option<i32>, i32), f64> = y
        .points
        .iter()
        .map(|p| ((p.prev_year, p.year), p.value))
        .collect();
    x.points
        .iter()
        .filter_map(|p| lookup.get(&(p.prev_year, p.year)).map(|&v| (p.value, v)))
        .unzip()
}

/// Average ranks, ties sharing the mean of their positions (1-based).
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation: Pearson on average ranks.
pub fn spearman_values(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    pearson_values(&ranks(x), &ranks(y))
}

/// Centered moving average over calendar years. Windows shrink at the edges
/// and around gaps; years without a value stay absent.
pub fn rolling_mean(series: &MetricSeries, window: usize) -> Result<MetricSeries, StatsError> {
    if window == 0 || window % 2 == 0 {
        return Err(StatsError::BadWindow(window));
    }
    let half = (window / 2) as i32;
    let points = series
        .points
        .iter()
        .map(|p| {
            let near: Vec<f64> = series
                .points
                .iter()
                .filter(|q| (q.year - p.year).abs() <= half)
                .map(|q| q.value)
                .collect();
            SeriesPoint {
                prev_year: p.prev_year,
                year: p.year,
                value: near.iter().sum::<f64>() / near.len() as f64,
            }
        })
        .collect();
    Ok(MetricSeries {
        points,
        variant: if window == 1 {
            series.variant.clone()
        } else {
            format!("{}+rolling{}", series.variant, window)
        },
        ..series.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedstore::tests::record;
    use crate::metrics::MetricName;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn series(values: &[(i32, f64)]) -> MetricSeries {
        MetricSeries {
            metric: MetricName::Aid,
            variant: "paper".into(),
            points: values
                .iter()
                .map(|&(year, value)| SeriesPoint { prev_year: None, year, value })
                .collect(),
            gaps: Vec::new(),
            params_digest: String::new(),
        }
    }

    fn gaussian_store(groups: &[(i32, usize, f64)], dim: usize, seed: u64) -> EmbeddingStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        let mut records = Vec::new();
        for &(year, n, shift) in groups {
            for _ in 0..n {
                for d in 0..dim {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let base = if d == 0 { 10.0 + shift } else { 0.0 };
                    data.push((base + z) as f32);
                }
                records.push(record(records.len() as u64, year, "PR"));
            }
        }
        EmbeddingStore::new(dim, data, records).unwrap()
    }

    #[test]
    fn bh_examples() {
        assert_eq!(bh_adjust(&[0.03]).unwrap(), vec![0.03]);
        assert_eq!(bh_adjust(&[0.2; 5]).unwrap(), vec![0.2; 5]);
        assert_eq!(bh_adjust(&[0.01, 0.02, 0.03, 0.04]).unwrap(), vec![0.04; 4]);
        assert_eq!(bh_adjust(&[0.04, 0.01]).unwrap(), vec![0.04, 0.02]);
        assert_eq!(bh_adjust(&[]).unwrap(), Vec::<f64>::new());
        assert!(bh_adjust(&[0.0]).is_err());
        assert!(bh_adjust(&[1.2]).is_err());
        assert!(bh_adjust(&[f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn bh_properties(p in prop::collection::vec(1e-6f64..=1.0, 1..40), seed in any::<u64>()) {
            let adj = bh_adjust(&p).unwrap();
            for (a, raw) in adj.iter().zip(&p) {
                prop_assert!(*a >= *raw && *a <= 1.0);
            }
            for i in 0..p.len() {
                for j in 0..p.len() {
                    if p[i] <= p[j] {
                        prop_assert!(adj[i] <= adj[j]);
                    }
                }
            }
            let mut perm: Vec<usize> = (0..p.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..perm.len()).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let shuffled: Vec<f64> = perm.iter().map(|&i| p[i]).collect();
            let adj_shuffled = bh_adjust(&shuffled).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(adj_shuffled[k], adj[i]);
            }
        }

        #[test]
        fn pearson_is_affine_invariant(
            x in prop::collection::vec(-100.0f64..100.0, 3..30),
            noise in prop::collection::vec(-1.0f64..1.0, 30),
            a in prop_oneof![-50.0f64..-0.1, 0.1f64..50.0],
            b in -100.0f64..100.0,
        ) {
            let y: Vec<f64> = x.iter().zip(&noise).map(|(v, e)| v * 0.3 + e * 10.0).collect();
            let base = pearson_values(&x, &y);
            prop_assume!(base.is_ok());
            let moved: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let got = pearson_values(&moved, &y).unwrap();
            prop_assert!((got - a.signum() * base.unwrap()).abs() <= 1e-12);
        }
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let affine: Vec<f64> = x.iter().map(|v| 2.0 * v + 3.0).collect();
        assert_eq!(pearson_values(&x, &affine).unwrap(), 1.0);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(pearson_values(&x, &neg).unwrap(), -1.0);
        let r = pearson_values(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.9819805060619659).abs() < 1e-15);
        assert_eq!(pearson_values(&[1.0], &[2.0]), Err(StatsError::TooShort(1)));
        assert_eq!(
            pearson_values(&[1.0, 1.0], &[2.0, 3.0]),
            Err(StatsError::ZeroVariance("x"))
        );
    }

    #[test]
    fn pearson_joins_series_on_shared_years() {
        let x = series(&[(1950, 1.0), (1951, 2.0), (1952, 3.0), (1953, 100.0)]);
        let y = series(&[(1949, 7.0), (1950, 2.0), (1951, 4.0), (1952, 6.0)]);
        assert_eq!(pearson(&x, &y).unwrap(), 1.0);
        let z = series(&[(1800, 1.0)]);
        assert_eq!(pearson(&x, &z), Err(StatsError::TooShort(0)));
    }

    #[test]
    fn spearman_uses_ranks() {
        assert_eq!(ranks(&[3.0, 1.0, 2.0, 1.0]), vec![4.0, 1.5, 3.0, 1.5]);
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman_values(&x, &[1.0, 10.0, 100.0, 1000.0]).unwrap(), 1.0);
    }

    #[test]
    fn rolling_mean_examples() {
        let s = series(&[(1, 1.0), (2, 2.0), (3, 3.0), (4, 4.0)]);
        assert_eq!(rolling_mean(&s, 1).unwrap(), s);
        assert_eq!(rolling_mean(&s, 3).unwrap().values(), vec![1.5, 2.0, 3.0, 3.5]);
        let flat = series(&[(1, 0.7), (2, 0.7), (3, 0.7)]);
        for v in rolling_mean(&flat, 3).unwrap().values() {
            assert!((v - 0.7).abs() < 1e-15);
        }
        assert_eq!(rolling_mean(&s, 2), Err(StatsError::BadWindow(2)));
        assert_eq!(rolling_mean(&s, 0), Err(StatsError::BadWindow(0)));
        // A gap year stays absent and narrows its neighbours' windows.
        let gappy = series(&[(1, 1.0), (2, 3.0), (4, 10.0)]);
        let smoothed = rolling_mean(&gappy, 3).unwrap();
        assert_eq!(smoothed.years(), vec![1, 2, 4]);
        assert_eq!(smoothed.values(), vec![2.0, 2.0, 10.0]);
    }

    #[test]
    fn far_apart_slices_reach_the_minimum_p_value() {
        let store = gaussian_store(&[(1950, 30, 0.0), (1951, 30, 0.0)], 4, 1);
        // Move the second group 10 sigma along an axis orthogonal to the common mean.
        let data: Vec<f32> = store
            .data()
            .chunks_exact(4)
            .enumerate()
            .flat_map(|(i, x)| {
                let mut v = x.to_vec();
                if i >= 30 {
                    v[1] += 10.0;
                }
                v
            })
            .collect();
        let store = EmbeddingStore::new(4, data, store.records().to_vec()).unwrap();
        let params = PermutationParams { r_max: 999, budget: None, seed: 2 };
        let res = permutation_test_prt(&store, &store.slice_by_year(1950), &store.slice_by_year(1951), &params)
            .unwrap();
        assert_eq!(res.count_ge, 0);
        assert_eq!(res.p_raw, 1.0 / 1000.0);
        assert!(res.observed > 1.0);
    }

    #[test]
    fn identical_slices_are_not_significant() {
        let base = gaussian_store(&[(1950, 40, 0.0)], 3, 9);
        let mut data = base.data().to_vec();
        data.extend_from_slice(base.data());
        let records = (0..80).map(|i| record(i, if i < 40 { 1950 } else { 1951 }, "PR")).collect();
        let store = EmbeddingStore::new(3, data, records).unwrap();
        let params = PermutationParams { r_max: 500, budget: None, seed: 4 };
        let res = permutation_test_prt(&store, &store.slice_by_year(1950), &store.slice_by_year(1951), &params)
            .unwrap();
        assert!(res.p_raw > 0.5, "p = {}", res.p_raw);
    }

    #[test]
    fn permutation_test_is_schedule_independent() {
        let store = gaussian_store(&[(1950, 25, 0.0), (1951, 25, 0.3)], 5, 3);
        let params = PermutationParams { r_max: 300, budget: Some(200), seed: 11 };
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| {
                    permutation_test_prt(&store, &store.slice_by_year(1950), &store.slice_by_year(1951), &params)
                        .unwrap()
                })
        };
        let one = run(1);
        assert_eq!(one.r, 200);
        assert!(one.p_raw > 0.0 && one.p_raw <= 1.0);
        assert_eq!(one, run(4));
        assert_eq!(one, run(8));
    }

    #[test]
    fn degenerate_slices_are_rejected() {
        let store = gaussian_store(&[(1950, 1, 0.0), (1951, 5, 0.0)], 2, 3);
        let err = permutation_test_prt(
            &store,
            &store.slice_by_year(1950),
            &store.slice_by_year(1951),
            &PermutationParams::default(),
        );
        assert_eq!(err, Err(StatsError::DegenerateSlice { year: 1950, found: 1 }));
    }

    #[test]
    fn series_tests_are_adjusted_jointly() {
        let store = gaussian_store(&[(1950, 20, 0.0), (1951, 20, 0.0), (1952, 20, 0.0)], 3, 5);
        let params = PermutationParams { r_max: 99, budget: None, seed: 1 };
        let results = permutation_series(&store, &params, None).unwrap();
        assert_eq!(results.len(), 2);
        let adj = bh_adjust(&[results[0].p_raw, results[1].p_raw]).unwrap();
        assert_eq!(results[0].p_adj, Some(adj[0]));
        assert_eq!(results[1].p_adj, Some(adj[1]));
        let mut csv = Vec::new();
        write_permutation_csv(&results, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("year_pair,observed,r,p_raw,p_adj\n1950-1951,"));
    }
}
