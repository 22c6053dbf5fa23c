//! Sense-cluster induction over a whole embedding collection.

mod affinity;
mod kmeans;
mod sample;

pub use affinity::{ap_fit, ap_fit_rows, ApParams, Preference};
pub use kmeans::{kmeans_fit, kmeans_fit_rows, KMeansParams};
pub use sample::{stratified_sample, year_sample_size, SampleParams};

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use rayon::prelude::*;

use crate::embedstore::{self, EmbeddingStore, StoreError};
use crate::kernels::sq_dist;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("k must be at least 1")]
    ZeroClusters,
    #[error("need at least {need} vectors, found {found}")]
    TooFewPoints { need: usize, found: usize },
    #[error("non-finite input component at row {0}")]
    NonFinite(usize),
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("{rows} rows exceed the affinity propagation cap of {cap}; sample the store first")]
    TooManyRows { rows: usize, cap: usize },
    #[error("affinity propagation did not converge in {iterations} iterations ({} provisional exemplars)", exemplars.len())]
    NotConverged {
        iterations: usize,
        exemplars: Vec<usize>,
    },
    #[error("model file {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClusterMethod {
    #[serde(rename = "kmeans")]
    KMeans,
    #[serde(rename = "affinity_propagation")]
    AffinityPropagation,
}

impl ClusterMethod {
    /// Short tag used in series variants and file names.
    pub fn tag(self) -> &'static str {
        match self {
            ClusterMethod::KMeans => "kmeans",
            ClusterMethod::AffinityPropagation => "ap",
        }
    }
}

/// What one model is fitted on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterScope {
    /// One model over every year, so cluster ids are shared across years.
    #[default]
    Corpus,
    /// A separate model per year. Cluster ids mean nothing across years.
    PerYear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum ClusterParams {
    #[serde(rename = "kmeans")]
    KMeans(KMeansParams),
    AffinityPropagation(ApParams),
}

/// A fitted partition of the rows it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    params: ClusterParams,
    dim: usize,
    labels: Vec<usize>,
    /// `n_clusters x dim`, row-major.
    centers: Vec<f64>,
    exemplar_rows: Vec<usize>,
    iterations: usize,
    converged: bool,
    /// K-Means: within-cluster sum of squares after every assignment step.
    objective_history: Vec<f64>,
    /// AP: the self-similarity actually used.
    preference: Option<f64>,
}

/// The JSON part of a saved model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelDescriptor {
    params: ClusterParams,
    n_clusters: usize,
    dim: usize,
    rows: usize,
    exemplar_rows: Vec<usize>,
    iterations: usize,
    converged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    preference: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    objective_history: Vec<f64>,
}

impl ClusterModel {
    pub fn method(&self) -> ClusterMethod {
        match self.params {
            ClusterParams::KMeans(_) => ClusterMethod::KMeans,
            ClusterParams::AffinityPropagation(_) => ClusterMethod::AffinityPropagation,
        }
    }

    pub fn params(&self) -> &ClusterParams {
        &self.params
    }

    pub fn n_clusters(&self) -> usize {
        self.centers.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn center(&self, cluster: usize) -> &[f64] {
        &self.centers[cluster * self.dim..(cluster + 1) * self.dim]
    }

    pub fn exemplar_rows(&self) -> &[usize] {
        &self.exemplar_rows
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn objective_history(&self) -> &[f64] {
        &self.objective_history
    }

    pub fn preference(&self) -> Option<f64> {
        self.preference
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_clusters()];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    fn descriptor(&self) -> ModelDescriptor {
        ModelDescriptor {
            params: self.params.clone(),
            n_clusters: self.n_clusters(),
            dim: self.dim,
            rows: self.labels.len(),
            exemplar_rows: self.exemplar_rows.clone(),
            iterations: self.iterations,
            converged: self.converged,
            preference: self.preference,
            objective_history: self.objective_history.clone(),
        }
    }

    /// Hex SHA-256 over the parameters and the label vector.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.params).expect("params serialize"));
        for &l in &self.labels {
            h.update((l as u32).to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn check(&self) -> Result<(), String> {
        let n = self.n_clusters();
        if self.centers.len() % self.dim != 0 {
            return Err("ragged center matrix".into());
        }
        let mut sizes = vec![0usize; n];
        for &l in &self.labels {
            if l >= n {
                return Err(format!("label {l} out of range for {n} clusters"));
            }
            sizes[l] += 1;
        }
        if let Some(c) = sizes.iter().position(|&s| s == 0) {
            return Err(format!("cluster {c} is empty"));
        }
        if self.method() == ClusterMethod::AffinityPropagation {
            if self.exemplar_rows.len() != n {
                return Err("one exemplar per cluster expected".into());
            }
            for (c, &row) in self.exemplar_rows.iter().enumerate() {
                if self.labels.get(row) != Some(&c) {
                    return Err(format!("exemplar row {row} is not in its own cluster {c}"));
                }
            }
        }
        Ok(())
    }
}

impl ClusterModel {
    /// Index of the nearest center for every row of `store`, lowest index on
    /// ties.
    pub fn predict(&self, store: &EmbeddingStore) -> Result<Vec<usize>, ClusterError> {
        if store.dim() != self.dim {
            return Err(ClusterError::InvalidParams(format!(
                "store dim {} does not match model dim {}",
                store.dim(),
                self.dim
            )));
        }
        let n = self.n_clusters();
        Ok((0..store.count())
            .into_par_iter()
            .map(|row| {
                let x: Vec<f64> = store.row(row).iter().map(|&v| f64::from(v)).collect();
                let mut best = (0, f64::INFINITY);
                for c in 0..n {
                    let d = sq_dist(&x, self.center(c));
                    if d < best.1 {
                        best = (c, d);
                    }
                }
                best.0
            })
            .collect())
    }

    /// Carries a model fitted on `source` over to `target`, a store holding
    /// every record of `source` (typically the store `source` was sampled
    /// from). Rows are labeled with their nearest center and AP exemplars
    /// keep their own cluster, located in `target` by occurrence id.
    pub fn extend_to(
        &self,
        source: &EmbeddingStore,
        target: &EmbeddingStore,
    ) -> Result<ClusterModel, ClusterError> {
        if source.count() != self.labels.len() {
            return Err(ClusterError::InvalidParams(format!(
                "model has {} labels but source store {} rows",
                self.labels.len(),
                source.count()
            )));
        }
        let mut labels = self.predict(target)?;
        let rows_by_id: std::collections::HashMap<u64, usize> = target
            .records()
            .iter()
            .enumerate()
            .map(|(i, r)| (r.occurrence_id, i))
            .collect();
        let mut exemplar_rows = Vec::with_capacity(self.exemplar_rows.len());
        for (c, &row) in self.exemplar_rows.iter().enumerate() {
            let id = source.records()[row].occurrence_id;
            let target_row = *rows_by_id.get(&id).ok_or_else(|| {
                ClusterError::InvalidParams(format!("exemplar occurrence {id} missing from target store"))
            })?;
            labels[target_row] = c;
            exemplar_rows.push(target_row);
        }
        let model = ClusterModel {
            labels,
            exemplar_rows,
            ..self.clone()
        };
        model.check().map_err(ClusterError::InvalidParams)?;
        Ok(model)
    }
}

/// Fits `fit` separately on the rows of each year, in year order.
///
/// Years too small for the method (a [`ClusterError::TooFewPoints`] from
/// `fit`) are left out; any other error aborts.
pub fn fit_per_year<F>(store: &EmbeddingStore, fit: F) -> Result<Vec<(i32, ClusterModel)>, ClusterError>
where
    F: Fn(&EmbeddingStore) -> Result<ClusterModel, ClusterError>,
{
    let mut models = Vec::new();
    for slice in store.slices() {
        match fit(&store.select_rows(&slice.indices)) {
            Ok(model) => models.push((slice.year, model)),
            Err(ClusterError::TooFewPoints { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(models)
}

pub fn model_json_path(stem: &Path) -> PathBuf {
    suffixed(stem, ".json")
}

pub fn model_labels_path(stem: &Path) -> PathBuf {
    suffixed(stem, ".labels.bin")
}

pub fn model_centers_path(stem: &Path) -> PathBuf {
    suffixed(stem, ".centers.vec")
}

fn suffixed(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

/// Saves `<stem>.json`, `<stem>.labels.bin` (little-endian `u32` per row) and
/// `<stem>.centers.vec`.
pub fn write_model(model: &ClusterModel, stem: &Path) -> Result<(), ClusterError> {
    let json_path = model_json_path(stem);
    let json = serde_json::to_string_pretty(&model.descriptor()).expect("descriptor serializes");
    std::fs::write(&json_path, json + "\n").map_err(|source| ClusterError::Io {
        path: json_path.clone(),
        source,
    })?;

    let labels_path = model_labels_path(stem);
    let io_err = |source| ClusterError::Io {
        path: labels_path.clone(),
        source,
    };
    let mut w = BufWriter::new(File::create(&labels_path).map_err(io_err)?);
    for &l in &model.labels {
        w.write_all(&(l as u32).to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;

    let centers: Vec<f32> = model.centers.iter().map(|&v| v as f32).collect();
    embedstore::write_matrix(&model_centers_path(stem), model.dim, &centers)?;
    Ok(())
}

/// Loads a model saved by [`write_model`]. Centers come back at `f32`
/// precision.
pub fn read_model(stem: &Path) -> Result<ClusterModel, ClusterError> {
    let json_path = model_json_path(stem);
    let text = std::fs::read_to_string(&json_path).map_err(|source| ClusterError::Io {
        path: json_path.clone(),
        source,
    })?;
    let desc: ModelDescriptor =
        serde_json::from_str(&text).map_err(|e| ClusterError::Format {
            path: json_path.clone(),
            message: e.to_string(),
        })?;

    let labels_path = model_labels_path(stem);
    let mut bytes = Vec::new();
    File::open(&labels_path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| ClusterError::Io {
            path: labels_path.clone(),
            source,
        })?;
    if bytes.len() != desc.rows * 4 {
        return Err(ClusterError::Format {
            path: labels_path,
            message: format!("{} bytes for {} rows", bytes.len(), desc.rows),
        });
    }
    let labels = bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();

    let centers_path = model_centers_path(stem);
    let (dim, count, centers) = embedstore::read_matrix(&centers_path)?;
    if dim != desc.dim || count != desc.n_clusters {
        return Err(ClusterError::Format {
            path: centers_path,
            message: format!("{count}x{dim} centers, descriptor says {}x{}", desc.n_clusters, desc.dim),
        });
    }
    let model = ClusterModel {
        params: desc.params,
        dim,
        labels,
        centers: centers.into_iter().map(f64::from).collect(),
        exemplar_rows: desc.exemplar_rows,
        iterations: desc.iterations,
        converged: desc.converged,
        objective_history: desc.objective_history,
        preference: desc.preference,
    };
    model.check().map_err(|message| ClusterError::Format {
        path: json_path,
        message,
    })?;
    Ok(model)
}

fn check_finite(data: &[f64], dim: usize) -> Result<(), ClusterError> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(pos) => Err(ClusterError::NonFinite(pos / dim)),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedstore::tests::store_from;

    #[test]
    fn model_files_roundtrip() {
        let data = vec![0.0, 0.0, 0.1, 0.0, 5.0, 5.0, 5.1, 5.0];
        let km = kmeans_fit_rows(&data, 2, &KMeansParams { k: 2, ..Default::default() }).unwrap();
        let ap = ap_fit_rows(&data, 2, &ApParams::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for model in [km, ap] {
            let stem = dir.path().join(model.method().tag());
            write_model(&model, &stem).unwrap();
            let back = read_model(&stem).unwrap();
            assert_eq!(back.labels(), model.labels());
            assert_eq!(back.exemplar_rows(), model.exemplar_rows());
            assert_eq!(back.params(), model.params());
            assert_eq!(back.digest(), model.digest());
            for (a, b) in back.centers().iter().zip(model.centers()) {
                assert_eq!(*a, f64::from(*b as f32));
            }
            let labels = std::fs::read(model_labels_path(&stem)).unwrap();
            assert_eq!(labels.len(), 4 * 4);
        }
    }

    #[test]
    fn per_year_fits_skip_years_that_are_too_small() {
        let store = store_from(&[
            (&[0.0], 1950, "PR"),
            (&[0.2], 1950, "PR"),
            (&[5.0], 1950, "PR"),
            (&[1.0], 1951, "PR"),
            (&[0.0], 1952, "PR"),
            (&[9.0], 1952, "PR"),
        ]);
        let params = KMeansParams { k: 2, ..Default::default() };
        let models = fit_per_year(&store, |s| kmeans_fit(s, &params)).unwrap();
        let years: Vec<i32> = models.iter().map(|(y, _)| *y).collect();
        assert_eq!(years, vec![1950, 1952]);
        assert_eq!(models[0].1.labels().len(), 3);
        assert_eq!(models[0].1.cluster_sizes().iter().max(), Some(&2));
        let bad = KMeansParams { k: 0, ..Default::default() };
        assert!(matches!(fit_per_year(&store, |s| kmeans_fit(s, &bad)), Err(ClusterError::ZeroClusters)));
    }

    #[test]
    fn sampled_model_extends_to_the_full_store() {
        let (a, a2): (&[f32], &[f32]) = (&[0.0, 0.0], &[0.1, 0.0]);
        let (b, b2): (&[f32], &[f32]) = (&[9.0, 9.0], &[9.0, 9.1]);
        let full = store_from(&[(a, 1950, "PR"), (b, 1950, "PR"), (a2, 1951, "PR"), (b2, 1951, "PR"), (b, 1952, "PR")]);
        let sample = full.select_rows(&[0, 1, 2, 3]);
        let ap = ap_fit(&sample, &ApParams::default()).unwrap();
        assert_eq!(ap.n_clusters(), 2);
        let extended = ap.extend_to(&sample, &full).unwrap();
        assert_eq!(extended.labels().len(), 5);
        let l = extended.labels();
        assert!(l[0] == l[2] && l[1] == l[3] && l[3] == l[4] && l[0] != l[1]);
        for (c, &row) in extended.exemplar_rows().iter().enumerate() {
            assert_eq!(l[row], c);
            assert_eq!(full.records()[row].occurrence_id, sample.records()[ap.exemplar_rows()[c]].occurrence_id);
        }
        assert!(ap.extend_to(&full, &full).is_err());
    }

    #[test]
    fn corrupt_label_file_is_rejected() {
        let data = vec![0.0, 1.0, 10.0, 11.0];
        let km = kmeans_fit_rows(&data, 1, &KMeansParams { k: 2, ..Default::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("km");
        write_model(&km, &stem).unwrap();
        std::fs::write(model_labels_path(&stem), [0u8; 15]).unwrap();
        assert!(matches!(read_model(&stem), Err(ClusterError::Format { .. })));
        std::fs::write(model_labels_path(&stem), [9u8; 16]).unwrap();
        assert!(matches!(read_model(&stem), Err(ClusterError::Format { .. })));
    }
}
