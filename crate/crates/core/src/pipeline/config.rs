use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{PipelineError, Stage};
use crate::cluster::{ApParams, ClusterMethod, ClusterScope, KMeansParams, SampleParams};
use crate::depfreq::GroupBy;
use crate::embedstore::{meta_path, vec_path};
use crate::metrics::{AidMode, MetricName};
use crate::stats::PermutationParams;
use crate::synth::SynthSpec;

/// One requested metric. In a config file either a bare name (`"prt"`) or an
/// object such as `{"metric": "aid", "aid_mode": "pair_mean"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "MetricRequestRepr")]
pub struct MetricRequest {
    pub metric: MetricName,
    /// Clustering behind JSD or entropy; `None` uses every configured method.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clustering: Option<ClusterMethod>,
    #[serde(default)]
    pub aid_mode: AidMode,
}

impl MetricRequest {
    pub fn new(metric: MetricName) -> Self {
        MetricRequest {
            metric,
            clustering: None,
            aid_mode: AidMode::default(),
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MetricRequestRepr {
    Name(MetricName),
    Full {
        metric: MetricName,
        #[serde(default)]
        clustering: Option<ClusterMethod>,
        #[serde(default)]
        aid_mode: AidMode,
    },
}

impl From<MetricRequestRepr> for MetricRequest {
    fn from(repr: MetricRequestRepr) -> Self {
        match repr {
            MetricRequestRepr::Name(metric) => MetricRequest::new(metric),
            MetricRequestRepr::Full {
                metric,
                clustering,
                aid_mode,
            } => MetricRequest {
                metric,
                clustering,
                aid_mode,
            },
        }
    }
}

/// Affinity propagation settings plus the per-year sample it is fitted on.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ApStageConfig {
    #[serde(flatten)]
    pub params: ApParams,
    #[serde(default)]
    pub sampling: SampleParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthStageConfig {
    #[serde(flatten)]
    pub spec: SynthSpec,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencyConfig {
    /// JSON-Lines dependency records.
    pub input: PathBuf,
    /// Adjective to keep; defaults to the target token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjective: Option<String>,
    #[serde(default)]
    pub group_by: GroupBy,
    #[serde(default = "default_dep_k")]
    pub k: usize,
}

fn default_dep_k() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Stem of a `.vec` / `.meta.jsonl` pair.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub store: Option<PathBuf>,
    /// Generated corpus used when no store is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthStageConfig>,
    #[serde(default = "default_token")]
    pub target_token: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub year_range: Option<(i32, i32)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub journals: Option<BTreeSet<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kmeans: Option<KMeansParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affinity_propagation: Option<ApStageConfig>,
    /// `per_year` fits one model per year; only entropy is defined then.
    #[serde(default)]
    pub clustering_scope: ClusterScope,
    #[serde(default)]
    pub metrics: Vec<MetricRequest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permutation: Option<PermutationParams>,
    #[serde(default = "default_window")]
    pub smoothing_window: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dependencies: Option<DependencyConfig>,
    /// Root seed. When set, every stage seed is derived from it and the
    /// per-stage seeds in the file are ignored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[serde(default, skip_serializing)]
    pub threads: Option<usize>,
    #[serde(default = "default_out", skip_serializing)]
    pub out_dir: PathBuf,
}

fn default_token() -> String {
    "virtual".into()
}
fn default_window() -> usize {
    3
}
fn default_out() -> PathBuf {
    PathBuf::from("scd-out")
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            store: None,
            synth: None,
            target_token: default_token(),
            year_range: None,
            journals: None,
            kmeans: None,
            affinity_propagation: None,
            clustering_scope: ClusterScope::Corpus,
            metrics: Vec::new(),
            permutation: None,
            smoothing_window: default_window(),
            dependencies: None,
            seed: None,
            threads: None,
            out_dir: default_out(),
        }
    }
}

/// Stage seed derived from the root seed and a stage name.
pub fn derive_seed(root: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(stage.as_bytes());
    let bytes = h.finalize();
    u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
}

fn config_err(message: impl Into<String>) -> PipelineError {
    PipelineError::new(Stage::Config, message)
}

impl PipelineConfig {
    /// Parses a JSON config. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        let mut config: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(store) = config.store.as_mut() {
            rebase(store);
        }
        if let Some(deps) = config.dependencies.as_mut() {
            rebase(&mut deps.input);
        }
        rebase(&mut config.out_dir);
        Ok(config)
    }

    /// Copy with stage seeds filled in from the root seed (if any) and the
    /// root seed cleared, so that running the copy gives the same results.
    pub fn resolved(&self) -> PipelineConfig {
        let mut c = self.clone();
        if let Some(root) = c.seed.take() {
            if let Some(km) = c.kmeans.as_mut() {
                km.seed = derive_seed(root, "kmeans");
            }
            if let Some(ap) = c.affinity_propagation.as_mut() {
                ap.params.seed = derive_seed(root, "affinity_propagation");
                ap.sampling.seed = derive_seed(root, "sampling");
            }
            if let Some(perm) = c.permutation.as_mut() {
                perm.seed = derive_seed(root, "permutation");
            }
            if let Some(synth) = c.synth.as_mut() {
                synth.seed = derive_seed(root, "synth");
            }
        }
        c
    }

    /// Methods configured for clustering, K-Means first.
    pub fn cluster_methods(&self) -> Vec<ClusterMethod> {
        let mut out = Vec::new();
        if self.kmeans.is_some() {
            out.push(ClusterMethod::KMeans);
        }
        if self.affinity_propagation.is_some() {
            out.push(ClusterMethod::AffinityPropagation);
        }
        out
    }

    /// Clusterings needed by the requested metrics.
    pub fn methods_for_metrics(&self) -> Vec<ClusterMethod> {
        let mut out = Vec::new();
        for m in self.cluster_methods() {
            let used = self.metrics.iter().any(|r| {
                matches!(r.metric, MetricName::Jsd | MetricName::Entropy)
                    && r.clustering.is_none_or(|c| c == m)
            });
            if used {
                out.push(m);
            }
        }
        out
    }

    pub(crate) fn check_common(&self) -> Result<(), PipelineError> {
        if let Some((lo, hi)) = self.year_range {
            if lo > hi {
                return Err(config_err(format!("year_range {lo}..{hi} is empty")));
            }
        }
        if self.smoothing_window == 0 || self.smoothing_window % 2 == 0 {
            return Err(config_err(format!(
                "smoothing_window must be odd and positive, got {}",
                self.smoothing_window
            )));
        }
        if self.threads == Some(0) {
            return Err(config_err("threads must be positive"));
        }
        Ok(())
    }

    pub(crate) fn check_source(&self) -> Result<(), PipelineError> {
        match (&self.store, &self.synth) {
            (Some(stem), _) => {
                for path in [vec_path(stem), meta_path(stem)] {
                    if !path.is_file() {
                        return Err(PipelineError::new(
                            Stage::Load,
                            format!("store file {} does not exist", path.display()),
                        ));
                    }
                }
                Ok(())
            }
            (None, Some(synth)) => synth
                .spec
                .validate()
                .map_err(|e| config_err(e.to_string())),
            (None, None) => Err(config_err("either `store` or `synth` must be given")),
        }
    }

    pub(crate) fn check_metrics(&self) -> Result<(), PipelineError> {
        if self.metrics.is_empty() {
            return Err(config_err("at least one metric must be requested"));
        }
        let methods = self.cluster_methods();
        for r in &self.metrics {
            if !matches!(r.metric, MetricName::Jsd | MetricName::Entropy) {
                continue;
            }
            let ok = match r.clustering {
                Some(m) => methods.contains(&m),
                None => !methods.is_empty(),
            };
            if !ok {
                return Err(config_err(format!(
                    "metric {} needs a configured clustering",
                    r.metric
                )));
            }
            if r.metric == MetricName::Jsd && self.clustering_scope == ClusterScope::PerYear {
                return Err(config_err(
                    "jsd compares years over shared clusters and needs clustering_scope `corpus`",
                ));
            }
        }
        Ok(())
    }

    pub(crate) fn check_dependencies(&self) -> Result<&DependencyConfig, PipelineError> {
        let deps = self
            .dependencies
            .as_ref()
            .ok_or_else(|| config_err("`dependencies` section missing"))?;
        if !deps.input.is_file() {
            return Err(PipelineError::new(
                Stage::Deps,
                format!("dependency file {} does not exist", deps.input.display()),
            ));
        }
        Ok(deps)
    }
}
