//! Frequency tables of adjective-to-head dependencies per decade or journal.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DepError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed dependency record on line {line}: {source}")]
    Malformed {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid dependency record on line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("k must be at least 1")]
    ZeroK,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyRecord {
    pub adj_lemma: String,
    pub head_lemma: String,
    pub year: i32,
    pub journal: String,
    pub doc_id: String,
}

impl DependencyRecord {
    fn check(&self) -> Result<(), String> {
        for (name, lemma) in [("adj_lemma", &self.adj_lemma), ("head_lemma", &self.head_lemma)] {
            if lemma.is_empty() {
                return Err(format!("{name} is empty"));
            }
            if lemma.chars().any(char::is_uppercase) {
                return Err(format!("{name} {lemma:?} is not lowercase"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    #[default]
    Decade,
    Journal,
}

/// Group key of a table row. Decades sort numerically, journals
/// lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GroupKey {
    Decade(i32),
    Journal(String),
}

impl std::fmt::Display for GroupKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GroupKey::Decade(d) => write!(f, "{d}"),
            GroupKey::Journal(j) => f.write_str(j),
        }
    }
}

pub fn decade_of(year: i32) -> i32 {
    year.div_euclid(10) * 10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepRow {
    pub group: GroupKey,
    pub rank: usize,
    pub head_lemma: String,
    pub count: usize,
    /// `count` over all dependencies of the group, not just the listed ones.
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DepTable {
    pub rows: Vec<DepRow>,
}

impl DepTable {
    pub fn groups(&self) -> Vec<&GroupKey> {
        let mut out: Vec<&GroupKey> = Vec::new();
        for r in &self.rows {
            if out.last() != Some(&&r.group) {
                out.push(&r.group);
            }
        }
        out
    }

    pub fn group_rows<'a>(&'a self, group: &'a GroupKey) -> impl Iterator<Item = &'a DepRow> + 'a {
        self.rows.iter().filter(move |r| &r.group == group)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "group,rank,head_lemma,count,share")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{}", r.group, r.rank, r.head_lemma, r.count, r.share)?;
        }
        Ok(())
    }
}

/// The `k` most frequent head lemmas per group. Ties go to the
/// lexicographically smaller lemma.
pub fn tabulate_top_dependencies(
    records: &[DependencyRecord],
    group_by: GroupBy,
    k: usize,
) -> Result<DepTable, DepError> {
    if k == 0 {
        return Err(DepError::ZeroK);
    }
    let mut counts: BTreeMap<GroupKey, HashMap<&str, usize>> = BTreeMap::new();
    for r in records {
        let key = match group_by {
            GroupBy::Decade => GroupKey::Decade(decade_of(r.year)),
            GroupBy::Journal => GroupKey::Journal(r.journal.clone()),
        };
        *counts
            .entry(key)
            .or_default()
            .entry(r.head_lemma.as_str())
            .or_insert(0) += 1;
    }
    let mut rows = Vec::new();
    for (group, lemmas) in counts {
        let total: usize = lemmas.values().sum();
        let mut ranked: Vec<(&str, usize)> = lemmas.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        for (i, (lemma, count)) in ranked.into_iter().take(k).enumerate() {
            rows.push(DepRow {
                group: group.clone(),
                rank: i + 1,
                head_lemma: lemma.to_string(),
                count,
                share: count as f64 / total as f64,
            });
        }
    }
    Ok(DepTable { rows })
}

/// Reads JSON-Lines dependency records, optionally keeping only one adjective.
pub fn read_dependencies(path: &Path, adjective: Option<&str>) -> Result<Vec<DependencyRecord>, DepError> {
    let io_err = |source| DepError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DependencyRecord = serde_json::from_str(&line)
            .map_err(|source| DepError::Malformed { line: i + 1, source })?;
        record
            .check()
            .map_err(|message| DepError::Invalid { line: i + 1, message })?;
        if adjective.is_none_or(|a| record.adj_lemma == a) {
            out.push(record);
        }
    }
    Ok(out)
}
