//! Diachronic semantic change detection over contextual token embeddings.
//!
//! Embeddings of one target token are stored per occurrence together with
//! their publication year. The crate slices them into yearly snapshots,
//! clusters them into usage types and scores change between snapshots with
//! prototype, distributional and dispersion metrics, backed by permutation
//! tests and corrected p-values.

pub mod cluster;
pub mod depfreq;
pub mod embedstore;
pub mod kernels;
pub mod metrics;
pub mod pipeline;
pub mod stats;
pub mod synth;
