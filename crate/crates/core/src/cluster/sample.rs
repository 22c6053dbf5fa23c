use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ClusterError;
use crate::embedstore::EmbeddingStore;

/// Per-year subsampling used before affinity propagation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleParams {
    pub fraction: f64,
    pub min_per_year: usize,
    pub seed: u64,
}

impl Default for SampleParams {
    fn default() -> Self {
        SampleParams {
            fraction: 0.25,
            min_per_year: 400,
            seed: 0,
        }
    }
}

/// Rows kept for a year holding `n` embeddings:
/// `min(n, max(ceil(fraction * n), min_per_year))`.
pub fn year_sample_size(n: usize, fraction: f64, min_per_year: usize) -> usize {
    let proportional = (fraction * n as f64).ceil() as usize;
    n.min(proportional.max(min_per_year))
}

/// Samples each year uniformly without replacement. Kept rows stay in their
/// original order.
pub fn stratified_sample(
    store: &EmbeddingStore,
    params: &SampleParams,
) -> Result<EmbeddingStore, ClusterError> {
    if !(params.fraction > 0.0 && params.fraction <= 1.0) {
        return Err(ClusterError::InvalidParams(format!(
            "sampling fraction {} outside (0, 1]",
            params.fraction
        )));
    }
    let mut keep = Vec::with_capacity(store.count());
    for slice in store.slices() {
        let n = slice.len();
        let m = year_sample_size(n, params.fraction, params.min_per_year);
        if m == n {
            keep.extend_from_slice(&slice.indices);
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(slice.year as u64);
        let mut picked = rand::seq::index::sample(&mut rng, n, m).into_vec();
        picked.sort_unstable();
        keep.extend(picked.into_iter().map(|i| slice.indices[i]));
    }
    keep.sort_unstable();
    Ok(store.select_rows(&keep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedstore::tests::record;

    fn store_with_counts(counts: &[(i32, usize)]) -> EmbeddingStore {
        let mut records = Vec::new();
        let mut data = Vec::new();
        let mut id = 0u64;
        for &(year, n) in counts {
            for _ in 0..n {
                records.push(record(id, year, "PR"));
                data.push(id as f32);
                id += 1;
            }
        }
        EmbeddingStore::new(1, data, records).unwrap()
    }

    #[test]
    fn sample_sizes_follow_the_policy() {
        assert_eq!(year_sample_size(100, 0.25, 400), 100);
        assert_eq!(year_sample_size(1000, 0.25, 400), 400);
        assert_eq!(year_sample_size(2000, 0.25, 400), 500);
        assert_eq!(year_sample_size(2001, 0.25, 400), 501);
        assert_eq!(year_sample_size(0, 0.25, 400), 0);
    }

    #[test]
    fn sampled_store_has_expected_year_counts() {
        let store = store_with_counts(&[(1930, 100), (1960, 1000), (1990, 2000)]);
        let sampled = stratified_sample(&store, &SampleParams { seed: 5, ..Default::default() }).unwrap();
        let counts = sampled.year_counts();
        assert_eq!(counts[&1930], 100);
        assert_eq!(counts[&1960], 400);
        assert_eq!(counts[&1990], 500);
        let ids: std::collections::HashSet<u64> =
            store.records().iter().map(|r| r.occurrence_id).collect();
        assert!(sampled.records().iter().all(|r| ids.contains(&r.occurrence_id)));
        assert!(sampled.records().windows(2).all(|w| w[0].occurrence_id < w[1].occurrence_id));
        let again = stratified_sample(&store, &SampleParams { seed: 5, ..Default::default() }).unwrap();
        assert_eq!(sampled, again);
    }

    #[test]
    fn full_fraction_is_identity() {
        let store = store_with_counts(&[(1950, 900), (1951, 3)]);
        let params = SampleParams { fraction: 1.0, min_per_year: 0, seed: 1 };
        assert_eq!(stratified_sample(&store, &params).unwrap(), store);
    }

    #[test]
    fn fraction_out_of_range_is_rejected() {
        let store = store_with_counts(&[(1950, 3)]);
        for fraction in [0.0, -0.1, 1.5, f64::NAN] {
            let params = SampleParams { fraction, ..Default::default() };
            assert!(stratified_sample(&store, &params).is_err());
        }
    }
}
