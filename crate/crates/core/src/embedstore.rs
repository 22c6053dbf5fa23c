//! Immutable embedding collections and their on-disk format.
//!
//! A store is written as two sibling files sharing a path stem:
//!
//! * `<stem>.vec` holds the vectors. A 16-byte little-endian header
//!   (`b"SCDE"`, `u16` version, two zero bytes, `u32` dim, `u32` count) is
//!   followed by `count * dim` `f32` values in row-major order.
//! * `<stem>.meta.jsonl` holds one JSON object per row, in row order, with the
//!   keys `occurrence_id`, `doc_id`, `year`, `journal` and `token`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"SCDE";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;

pub const MIN_YEAR: i32 = 1000;
pub const MAX_YEAR: i32 = 9999;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic bytes in {0}")]
    BadMagic(PathBuf),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("trailing bytes after payload: expected {expected} bytes, found {found}")]
    TrailingBytes { expected: u64, found: u64 },
    #[error("metadata has {found} lines but the vector file has {expected} rows")]
    MetadataMismatch { expected: usize, found: usize },
    #[error("malformed metadata on line {line}: {source}")]
    MalformedMetadata {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid store: {0}")]
    Invalid(String),
}

impl StoreError {
    fn io(path: &Path, source: io::Error) -> Self {
        StoreError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Metadata for one occurrence of the target word.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub occurrence_id: u64,
    pub doc_id: String,
    pub year: i32,
    pub journal: String,
    pub token: String,
    /// Index of the vector in the parent store. Implied by line order on disk.
    #[serde(skip)]
    pub row: usize,
}

/// Row indices of one calendar year.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimeSlice {
    pub year: i32,
    pub indices: Vec<usize>,
}

impl TimeSlice {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// A validated, immutable matrix of embeddings plus per-row metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    data: Vec<f32>,
    records: Vec<EmbeddingRecord>,
}

impl EmbeddingStore {
    /// Builds a store, rewriting each record's `row` to its position and
    /// checking every store invariant.
    pub fn new(
        dim: usize,
        data: Vec<f32>,
        mut records: Vec<EmbeddingRecord>,
    ) -> Result<Self, StoreError> {
        for (row, record) in records.iter_mut().enumerate() {
            record.row = row;
        }
        let store = EmbeddingStore { dim, data, records };
        store.validate()?;
        Ok(store)
    }

    /// An empty store of the given dimensionality.
    pub fn empty(dim: usize) -> Result<Self, StoreError> {
        Self::new(dim, Vec::new(), Vec::new())
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        if self.dim == 0 {
            return Err(StoreError::Invalid("dim must be positive".into()));
        }
        if u32::try_from(self.dim).is_err() {
            return Err(StoreError::Invalid(format!("dim {} exceeds u32", self.dim)));
        }
        if u32::try_from(self.records.len()).is_err() {
            return Err(StoreError::Invalid(format!(
                "count {} exceeds u32",
                self.records.len()
            )));
        }
        if self.data.len() != self.records.len() * self.dim {
            return Err(StoreError::Invalid(format!(
                "matrix has {} values, expected {} rows x {} dims",
                self.data.len(),
                self.records.len(),
                self.dim
            )));
        }
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(StoreError::Invalid(format!(
                "non-finite component at row {} dim {}",
                pos / self.dim,
                pos % self.dim
            )));
        }
        let mut seen = HashSet::with_capacity(self.records.len());
        for (row, record) in self.records.iter().enumerate() {
            if record.row != row {
                return Err(StoreError::Invalid(format!(
                    "record {} claims row {}",
                    row, record.row
                )));
            }
            if !(MIN_YEAR..=MAX_YEAR).contains(&record.year) {
                return Err(StoreError::Invalid(format!(
                    "year {} out of range at row {}",
                    record.year, row
                )));
            }
            if !seen.insert(record.occurrence_id) {
                return Err(StoreError::Invalid(format!(
                    "duplicate occurrence_id {}",
                    record.occurrence_id
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    /// Raw row-major `f32` matrix.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    /// Copies the given rows into a contiguous row-major `f64` matrix.
    pub fn rows_f64(&self, rows: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            out.extend(self.row(r).iter().map(|&v| f64::from(v)));
        }
        out
    }

    /// Distinct years present, ascending.
    pub fn years(&self) -> Vec<i32> {
        self.records
            .iter()
            .map(|r| r.year)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn year_counts(&self) -> BTreeMap<i32, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.year).or_insert(0) += 1;
        }
        counts
    }

    /// All rows of year `year`, ascending. Absent years give an empty slice.
    pub fn slice_by_year(&self, year: i32) -> TimeSlice {
        let indices = self
            .records
            .iter()
            .filter(|r| r.year == year)
            .map(|r| r.row)
            .collect();
        TimeSlice { year, indices }
    }

    /// One slice per distinct year, in year order.
    pub fn slices(&self) -> Vec<TimeSlice> {
        let mut by_year: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
        for r in &self.records {
            by_year.entry(r.year).or_default().push(r.row);
        }
        by_year
            .into_iter()
            .map(|(year, indices)| TimeSlice { year, indices })
            .collect()
    }

    /// A new store holding the listed rows (in the given order) with rows
    /// renumbered from zero.
    pub fn select_rows(&self, rows: &[usize]) -> EmbeddingStore {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        let mut records = Vec::with_capacity(rows.len());
        for (new_row, &r) in rows.iter().enumerate() {
            data.extend_from_slice(self.row(r));
            let mut rec = self.records[r].clone();
            rec.row = new_row;
            records.push(rec);
        }
        EmbeddingStore {
            dim: self.dim,
            data,
            records,
        }
    }

    /// Keeps the records matching every given filter. Both bounds of
    /// `year_range` are inclusive.
    pub fn filter(
        &self,
        journals: Option<&BTreeSet<String>>,
        year_range: Option<(i32, i32)>,
    ) -> Result<EmbeddingStore, StoreError> {
        if let Some((lo, hi)) = year_range {
            if lo > hi {
                return Err(StoreError::Invalid(format!(
                    "year range ({lo}, {hi}) is reversed"
                )));
            }
        }
        let rows: Vec<usize> = self
            .records
            .iter()
            .filter(|r| journals.is_none_or(|set| set.contains(&r.journal)))
            .filter(|r| year_range.is_none_or(|(lo, hi)| (lo..=hi).contains(&r.year)))
            .map(|r| r.row)
            .collect();
        Ok(self.select_rows(&rows))
    }

    /// Keeps only the records whose token equals `token`.
    pub fn filter_token(&self, token: &str) -> EmbeddingStore {
        let rows: Vec<usize> = self
            .records
            .iter()
            .filter(|r| r.token == token)
            .map(|r| r.row)
            .collect();
        self.select_rows(&rows)
    }
}

pub fn vec_path(stem: &Path) -> PathBuf {
    with_suffix(stem, ".vec")
}

pub fn meta_path(stem: &Path) -> PathBuf {
    with_suffix(stem, ".meta.jsonl")
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes a bare `.vec` file (header plus payload).
pub fn write_matrix(path: &Path, dim: usize, data: &[f32]) -> Result<(), StoreError> {
    if dim == 0 || data.len() % dim != 0 {
        return Err(StoreError::Invalid(format!(
            "{} values do not form rows of {dim}",
            data.len()
        )));
    }
    let dim32 = u32::try_from(dim).map_err(|_| StoreError::Invalid("dim exceeds u32".into()))?;
    let count32 = u32::try_from(data.len() / dim)
        .map_err(|_| StoreError::Invalid("count exceeds u32".into()))?;
    let file = File::create(path).map_err(|e| StoreError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = [0u8; HEADER_LEN];
    header[0..4].copy_from_slice(MAGIC);
    header[4..6].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
    header[8..12].copy_from_slice(&dim32.to_le_bytes());
    header[12..16].copy_from_slice(&count32.to_le_bytes());
    let write = |w: &mut BufWriter<File>| -> io::Result<()> {
        w.write_all(&header)?;
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    };
    write(&mut w).map_err(|e| StoreError::io(path, e))
}

/// Reads a bare `.vec` file, returning `(dim, count, data)`.
pub fn read_matrix(path: &Path) -> Result<(usize, usize, Vec<f32>), StoreError> {
    let mut file = File::open(path).map_err(|e| StoreError::io(path, e))?;
    let found = file.metadata().map_err(|e| StoreError::io(path, e))?.len();
    let mut header = [0u8; HEADER_LEN];
    if found < HEADER_LEN as u64 {
        return Err(StoreError::Truncated {
            expected: HEADER_LEN as u64,
            found,
        });
    }
    file.read_exact(&mut header)
        .map_err(|e| StoreError::io(path, e))?;
    if &header[0..4] != MAGIC {
        return Err(StoreError::BadMagic(path.to_path_buf()));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != FORMAT_VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let dim = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let expected = HEADER_LEN as u64 + (dim as u64) * (count as u64) * 4;
    if found < expected {
        return Err(StoreError::Truncated { expected, found });
    }
    if found > expected {
        return Err(StoreError::TrailingBytes { expected, found });
    }
    let mut bytes = vec![0u8; (expected - HEADER_LEN as u64) as usize];
    file.read_exact(&mut bytes)
        .map_err(|e| StoreError::io(path, e))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((dim, count, data))
}

/// Writes `<stem>.vec` and `<stem>.meta.jsonl`. Nothing is written when the
/// store fails validation.
pub fn write_store(store: &EmbeddingStore, stem: &Path) -> Result<(), StoreError> {
    store.validate()?;
    write_matrix(&vec_path(stem), store.dim, &store.data)?;
    let meta = meta_path(stem);
    let file = File::create(&meta).map_err(|e| StoreError::io(&meta, e))?;
    let mut w = BufWriter::new(file);
    for record in &store.records {
        serde_json::to_writer(&mut w, record).map_err(|e| StoreError::io(&meta, e.into()))?;
        w.write_all(b"\n").map_err(|e| StoreError::io(&meta, e))?;
    }
    w.flush().map_err(|e| StoreError::io(&meta, e))
}

pub fn read_store(stem: &Path) -> Result<EmbeddingStore, StoreError> {
    let (dim, count, data) = read_matrix(&vec_path(stem))?;
    let meta = meta_path(stem);
    let file = File::open(&meta).map_err(|e| StoreError::io(&meta, e))?;
    let mut records = Vec::with_capacity(count);
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| StoreError::io(&meta, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EmbeddingRecord = serde_json::from_str(&line)
            .map_err(|source| StoreError::MalformedMetadata { line: i + 1, source })?;
        records.push(record);
    }
    if records.len() != count {
        return Err(StoreError::MetadataMismatch {
            expected: count,
            found: records.len(),
        });
    }
    EmbeddingStore::new(dim, data, records)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn record(id: u64, year: i32, journal: &str) -> EmbeddingRecord {
        EmbeddingRecord {
            occurrence_id: id,
            doc_id: format!("doc-{id}"),
            year,
            journal: journal.to_string(),
            token: "virtual".to_string(),
            row: 0,
        }
    }

    pub(crate) fn store_from(rows: &[(&[f32], i32, &str)]) -> EmbeddingStore {
        let dim = rows[0].0.len();
        let data = rows.iter().flat_map(|r| r.0.iter().copied()).collect();
        let records = rows
            .iter()
            .enumerate()
            .map(|(i, r)| record(i as u64, r.1, r.2))
            .collect();
        EmbeddingStore::new(dim, data, records).unwrap()
    }

    #[test]
    fn vec_file_size_is_header_plus_payload() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("s");
        let store = store_from(&[(&[1.0, 2.0, 3.0], 1924, "PR"), (&[4.0, 5.0, 6.0], 1925, "PR")]);
        write_store(&store, &stem).unwrap();
        assert_eq!(std::fs::metadata(vec_path(&stem)).unwrap().len(), 40);
        let bytes = std::fs::read(vec_path(&stem)).unwrap();
        assert_eq!(&bytes[0..4], b"SCDE");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
    }

    #[test]
    fn write_read_write_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        let store = store_from(&[(&[0.1, -2.5], 1930, "PR"), (&[1e-30, 7.0], 1931, "PR-C")]);
        write_store(&store, &a).unwrap();
        let back = read_store(&a).unwrap();
        assert_eq!(back, store);
        write_store(&back, &b).unwrap();
        assert_eq!(
            std::fs::read(vec_path(&a)).unwrap(),
            std::fs::read(vec_path(&b)).unwrap()
        );
        assert_eq!(
            std::fs::read(meta_path(&a)).unwrap(),
            std::fs::read(meta_path(&b)).unwrap()
        );
    }

    #[test]
    fn hand_assembled_files_are_read() {
        // Files as a separate producer would lay them out, byte by byte.
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("extracted");
        let mut bytes = b"SCDE".to_vec();
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&[0, 0]);
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        for v in [0.5f32, -1.0, 2.25, 3.0, 0.0, -0.125] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(vec_path(&stem), &bytes).unwrap();
        std::fs::write(
            meta_path(&stem),
            concat!(
                r#"{"occurrence_id":10,"doc_id":"10.1103/PhysRev.1","year":1931,"journal":"PR","token":"virtual"}"#,
                "\n",
                r#"{"occurrence_id":11,"doc_id":"10.1103/PhysRev.2","year":1932,"journal":"RMP","token":"virtual"}"#,
                "\n"
            ),
        )
        .unwrap();
        let store = read_store(&stem).unwrap();
        assert_eq!((store.dim(), store.count()), (3, 2));
        assert_eq!(store.row(1), &[3.0, 0.0, -0.125]);
        assert_eq!(store.records()[1].journal, "RMP");
        assert_eq!(store.records()[1].row, 1);
        assert_eq!(store.year_counts().into_iter().collect::<Vec<_>>(), vec![(1931, 1), (1932, 1)]);

        let copy = dir.path().join("copy");
        write_store(&store, &copy).unwrap();
        assert_eq!(std::fs::read(vec_path(&copy)).unwrap(), bytes);
    }

    #[test]
    fn nan_component_is_rejected_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("bad");
        let store = EmbeddingStore {
            dim: 2,
            data: vec![1.0, f32::NAN],
            records: vec![record(0, 1950, "PR")],
        };
        assert!(matches!(write_store(&store, &stem), Err(StoreError::Invalid(_))));
        assert!(!vec_path(&stem).exists());
        assert!(!meta_path(&stem).exists());
        assert!(EmbeddingStore::new(2, vec![1.0, f32::INFINITY], vec![record(0, 1950, "PR")]).is_err());
    }

    #[test]
    fn store_invariants_are_checked() {
        assert!(EmbeddingStore::new(2, vec![1.0], vec![record(0, 1950, "PR")]).is_err());
        assert!(EmbeddingStore::new(1, vec![1.0], vec![record(0, 999, "PR")]).is_err());
        assert!(EmbeddingStore::new(
            1,
            vec![1.0, 2.0],
            vec![record(7, 1950, "PR"), record(7, 1951, "PR")]
        )
        .is_err());
        assert!(EmbeddingStore::new(0, vec![], vec![]).is_err());
    }

    #[test]
    fn truncated_vec_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("t");
        let store = store_from(&[(&[1.0, 2.0], 1950, "PR"), (&[3.0, 4.0], 1950, "PR")]);
        write_store(&store, &stem).unwrap();
        let path = vec_path(&stem);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(
            read_store(&stem),
            Err(StoreError::Truncated { expected: 32, found: 31 })
        ));
    }

    #[test]
    fn header_errors_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("h");
        let store = store_from(&[(&[1.0], 1950, "PR")]);
        write_store(&store, &stem).unwrap();
        let path = vec_path(&stem);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 2;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_store(&stem), Err(StoreError::UnsupportedVersion(2))));
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_store(&stem), Err(StoreError::BadMagic(_))));
    }

    #[test]
    fn metadata_line_count_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("m");
        let store = store_from(&[(&[1.0], 1950, "PR"), (&[2.0], 1951, "PR")]);
        write_store(&store, &stem).unwrap();
        let meta = std::fs::read_to_string(meta_path(&stem)).unwrap();
        let first = meta.lines().next().unwrap();
        std::fs::write(meta_path(&stem), format!("{first}\n")).unwrap();
        assert!(matches!(
            read_store(&stem),
            Err(StoreError::MetadataMismatch { expected: 2, found: 1 })
        ));
        std::fs::write(meta_path(&stem), format!("{first}\n{{not json\n")).unwrap();
        assert!(matches!(
            read_store(&stem),
            Err(StoreError::MalformedMetadata { line: 2, .. })
        ));
    }

    #[test]
    fn slice_by_year_counts_rows() {
        let v: &[f32] = &[0.0];
        let store = store_from(&[
            (v, 1924, "PR"),
            (v, 1924, "PR"),
            (v, 1924, "PR"),
            (v, 1925, "PR"),
            (v, 1925, "PR"),
        ]);
        assert_eq!(store.slice_by_year(1924).indices, vec![0, 1, 2]);
        assert_eq!(store.slice_by_year(1925).indices, vec![3, 4]);
        assert!(store.slice_by_year(1926).is_empty());
        assert_eq!(store.year_counts().get(&1924), Some(&3));
    }

    #[test]
    fn filter_by_journal_and_year() {
        let v: &[f32] = &[1.0, 0.5];
        let mut rows = Vec::new();
        for i in 0..15 {
            rows.push((v, 1960 + i, if i < 10 { "PR-C" } else { "PR-D" }));
        }
        let store = store_from(&rows);
        assert_eq!(store.filter(None, None).unwrap(), store);
        let journals: BTreeSet<String> = ["PR-C".to_string()].into();
        let c = store.filter(Some(&journals), None).unwrap();
        assert_eq!(c.count(), 10);
        assert!(c.records().iter().enumerate().all(|(i, r)| r.row == i));
        assert_eq!(store.filter(None, Some((3000, 3001))).unwrap().count(), 0);
        assert_eq!(store.filter(None, Some((1965, 1966))).unwrap().count(), 2);
        assert!(store.filter(None, Some((1970, 1960))).is_err());
        assert_eq!(store.count(), 15);
    }
}
