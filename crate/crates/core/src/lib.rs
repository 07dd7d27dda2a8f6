//! Anomaly detection and propagation-path ranking for microservice call chains.
//!
//! The pipeline turns raw distributed-trace spans into windowed service
//! graphs, encodes each window with a small graph-convolutional stack plus a
//! GRU over per-edge history, and scores every service by its squared
//! distance from a centroid of normal behaviour. Anomalous call paths are
//! ranked by the mean score of the services along them.
//!
//! Modules follow the data flow:
//!
//! * [`span`] — NDJSON span parsing, trace-tree reconstruction, call paths
//! * [`graph`] — windowing, feature aggregation, adjacency normalization
//! * [`tensor`] / [`tape`] — dense matrices and the reverse-mode autodiff tape
//! * [`model`] — GCN + GRU encoders and their fused node embeddings
//! * [`detector`] — one-class training, scoring, thresholding, path ranking
//! * [`synth`] — seeded synthetic workloads, anomaly and scaling injection
//! * [`eval`] — AUC / classification metrics, benchmark and sweep harness

pub mod detector;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod jsonfmt;
pub mod model;
pub mod span;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::Error;
pub use tensor::Tensor2;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
