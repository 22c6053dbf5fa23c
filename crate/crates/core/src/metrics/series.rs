use std::fmt;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    aid, cluster_distribution, entropy_normalized, jsd, prototype, prt, AidMode, MetricError,
};
use crate::cluster::ClusterModel;
use crate::embedstore::{EmbeddingStore, TimeSlice};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Prt,
    Jsd,
    Entropy,
    Aid,
}

impl MetricName {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::Prt => "prt",
            MetricName::Jsd => "jsd",
            MetricName::Entropy => "entropy",
            MetricName::Aid => "aid",
        }
    }

    /// Whether the metric compares consecutive years rather than single years.
    pub fn is_pairwise(self) -> bool {
        matches!(self, MetricName::Prt | MetricName::Jsd)
    }
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A metric request for [`compute_series`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Prt,
    Jsd,
    Entropy,
    Aid(AidMode),
}

impl Metric {
    pub fn name(self) -> MetricName {
        match self {
            Metric::Prt => MetricName::Prt,
            Metric::Jsd => MetricName::Jsd,
            Metric::Entropy => MetricName::Entropy,
            Metric::Aid(_) => MetricName::Aid,
        }
    }

    pub fn needs_model(self) -> bool {
        matches!(self, Metric::Jsd | Metric::Entropy)
    }
}

/// One value of a series. Pairwise metrics carry the preceding year in
/// `prev_year`; `year` is always the later year.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub prev_year: Option<i32>,
    pub year: i32,
    pub value: f64,
}

impl SeriesPoint {
    pub fn key(&self) -> String {
        match self.prev_year {
            Some(p) => format!("{}-{}", p, self.year),
            None => self.year.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub metric: MetricName,
    pub variant: String,
    pub points: Vec<SeriesPoint>,
    /// Years in range without a defined value. Never zero-filled.
    pub gaps: Vec<i32>,
    pub params_digest: String,
}

impl MetricSeries {
    pub fn values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.value).collect()
    }

    pub fn years(&self) -> Vec<i32> {
        self.points.iter().map(|p| p.year).collect()
    }

    pub fn get(&self, year: i32) -> Option<f64> {
        self.points.iter().find(|p| p.year == year).map(|p| p.value)
    }

    /// Index of the largest value; first occurrence wins ties.
    pub fn argmax(&self) -> Option<&SeriesPoint> {
        self.points
            .iter()
            .fold(None, |best: Option<&SeriesPoint>, p| match best {
                Some(b) if b.value >= p.value => Some(b),
                _ => Some(p),
            })
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let key = if self.metric.is_pairwise() {
            "year_pair"
        } else {
            "year"
        };
        writeln!(w, "{key},value,metric,variant")?;
        for p in &self.points {
            writeln!(w, "{},{},{},{}", p.key(), p.value, self.metric, self.variant)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("series serializes")
    }
}

/// Computes one metric across the years of `store`.
///
/// Pairwise metrics compare each populated year with the preceding populated
/// year. Years inside `year_range` (or the store's span) without usable data
/// are listed in `gaps`; for AID a year also needs two embeddings.
pub fn compute_series(
    store: &EmbeddingStore,
    model: Option<&ClusterModel>,
    metric: Metric,
    year_range: Option<(i32, i32)>,
) -> Result<MetricSeries, MetricError> {
    let model = match (metric.needs_model(), model) {
        (true, None) => return Err(MetricError::MissingModel(metric.name())),
        (true, Some(m)) => {
            if m.labels().len() != store.count() {
                return Err(MetricError::ModelMismatch(format!(
                    "{} labels for {} rows",
                    m.labels().len(),
                    store.count()
                )));
            }
            Some(m)
        }
        (false, _) => None,
    };
    let variant = match metric {
        Metric::Prt => "prototype".to_string(),
        Metric::Aid(mode) => mode.tag().to_string(),
        Metric::Jsd | Metric::Entropy => model.unwrap().method().tag().to_string(),
    };
    let params_digest = model.map(|m| m.digest()).unwrap_or_default();

    let all_years = store.years();
    let (lo, hi) = match year_range {
        Some(r) => r,
        None => match (all_years.first(), all_years.last()) {
            (Some(&a), Some(&b)) => (a, b),
            _ => {
                return Ok(MetricSeries {
                    metric: metric.name(),
                    variant,
                    points: Vec::new(),
                    gaps: Vec::new(),
                    params_digest,
                })
            }
        },
    };
    let min_support = if matches!(metric, Metric::Aid(_)) { 2 } else { 1 };
    let mut usable: Vec<TimeSlice> = Vec::new();
    let mut gaps = Vec::new();
    let mut slices = store
        .slices()
        .into_iter()
        .filter(|s| (lo..=hi).contains(&s.year))
        .peekable();
    for year in lo..=hi {
        match slices.next_if(|s| s.year == year) {
            Some(s) if s.len() >= min_support => usable.push(s),
            _ => gaps.push(year),
        }
    }

    let mut points = Vec::new();
    match metric {
        Metric::Prt => {
            let protos = usable
                .iter()
                .map(|s| prototype(store, s))
                .collect::<Result<Vec<_>, _>>()?;
            for pair in protos.windows(2) {
                points.push(SeriesPoint {
                    prev_year: Some(pair[0].year),
                    year: pair[1].year,
                    value: prt(&pair[0], &pair[1])?,
                });
            }
        }
        Metric::Jsd => {
            let model = model.unwrap();
            let dists = usable
                .iter()
                .map(|s| cluster_distribution(model, s))
                .collect::<Result<Vec<_>, _>>()?;
            for pair in dists.windows(2) {
                points.push(SeriesPoint {
                    prev_year: Some(pair[0].year),
                    year: pair[1].year,
                    value: jsd(&pair[0], &pair[1])?,
                });
            }
        }
        Metric::Entropy => {
            let model = model.unwrap();
            for s in &usable {
                let d = cluster_distribution(model, s)?;
                points.push(SeriesPoint {
                    prev_year: None,
                    year: s.year,
                    value: entropy_normalized(&d)?,
                });
            }
        }
        Metric::Aid(mode) => {
            for s in &usable {
                points.push(SeriesPoint {
                    prev_year: None,
                    year: s.year,
                    value: aid(store, s, mode)?,
                });
            }
        }
    }
    Ok(MetricSeries {
        metric: metric.name(),
        variant,
        points,
        gaps,
        params_digest,
    })
}

/// Normalized entropy of each year under its own model (see
/// [`crate::cluster::fit_per_year`]). The variant is the method tag with a
/// `_per_year` suffix; years in range without a model are gaps.
pub fn per_year_entropy_series(
    models: &[(i32, ClusterModel)],
    year_range: Option<(i32, i32)>,
) -> Result<MetricSeries, MetricError> {
    let method = match models.first() {
        Some((_, m)) => m.method(),
        None => {
            return Err(MetricError::ModelMismatch("no per-year models".into()));
        }
    };
    let (lo, hi) = year_range.unwrap_or((models[0].0, models[models.len() - 1].0));
    let mut points = Vec::new();
    let mut gaps = Vec::new();
    let mut digests = Vec::new();
    for year in lo..=hi {
        let Some((_, model)) = models.iter().find(|(y, _)| *y == year) else {
            gaps.push(year);
            continue;
        };
        if model.method() != method {
            return Err(MetricError::ModelMismatch("per-year models mix clustering methods".into()));
        }
        let support = model.labels().len();
        let probs = model
            .cluster_sizes()
            .iter()
            .map(|&c| c as f64 / support as f64)
            .collect();
        let d = super::ClusterDistribution::from_probs(year, probs, support)?;
        points.push(SeriesPoint {
            prev_year: None,
            year,
            value: entropy_normalized(&d)?,
        });
        digests.push(model.digest());
    }
    let mut h = Sha256::new();
    for d in &digests {
        h.update(d.as_bytes());
    }
    Ok(MetricSeries {
        metric: MetricName::Entropy,
        variant: format!("{}_per_year", method.tag()),
        points,
        gaps,
        params_digest: hex::encode(h.finalize()),
    })
}
