//! Crate-wide error type.
//!
//! Per-line ingestion problems are *not* errors — they are collected as
//! [`crate::span::RejectedLine`] values. `Error` covers operation-level
//! failures: structural defects in a trace, shape or finiteness violations in
//! the numeric kernel, and invalid configuration.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    // --- trace reconstruction -------------------------------------------
    #[error("empty span list")]
    EmptyTrace,

    #[error("spans belong to multiple traces: {0:?}")]
    MixedTraceIds(Vec<String>),

    #[error("trace {trace_id}: duplicate span_id {span_id:?}")]
    DuplicateSpanId { trace_id: String, span_id: String },

    #[error("trace {trace_id}: no root span (every span names a parent)")]
    NoRootSpan { trace_id: String },

    #[error("trace {trace_id}: multiple root spans: {span_ids:?}")]
    MultipleRoots {
        trace_id: String,
        span_ids: Vec<String>,
    },

    #[error("trace {trace_id}: parent_span_id does not resolve for spans {span_ids:?}")]
    DanglingParent {
        trace_id: String,
        span_ids: Vec<String>,
    },

    #[error("trace {trace_id}: parent cycle among spans {span_ids:?}")]
    ParentCycle {
        trace_id: String,
        span_ids: Vec<String>,
    },

    // --- numeric kernel --------------------------------------------------
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("tensor construction: non-finite entry")]
    NonFiniteInput,

    #[error("backward: loss node must be 1x1, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("backward: tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("gradient requested before backward was run")]
    GradientUnavailable,

    // --- graph construction ----------------------------------------------
    #[error("adjacency matrix must be square, got {rows}x{cols}")]
    NonSquareAdjacency { rows: usize, cols: usize },

    #[error("adjacency entry ({row},{col}) is negative")]
    NegativeAdjacency { row: usize, col: usize },

    #[error("feature stats mismatch: expected {expected} columns, got {got}")]
    StatsSchemaMismatch { expected: usize, got: usize },

    #[error("window indices must be contiguous: expected {expected}, got {got}")]
    NonContiguousWindows { expected: i64, got: i64 },

    #[error("edge history length {got} does not match configured length {expected}")]
    RaggedEdgeHistory { expected: usize, got: usize },

    // --- detection --------------------------------------------------------
    #[error("centroid requested over zero node embeddings")]
    EmptyCentroidInput,

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    DivergedAtEpoch { epoch: usize },

    #[error("quantile {q} outside (0, 1)")]
    InvalidQuantile { q: f64 },

    #[error("threshold requested over an empty score set")]
    EmptyScores,

    #[error("unknown service {service:?}")]
    UnknownService { service: String },

    // --- synthesis --------------------------------------------------------
    #[error("affected window {window} outside corpus range 0..={max}")]
    WindowOutOfRange { window: i64, max: i64 },

    // --- evaluation -------------------------------------------------------
    #[error("ranking metrics need both classes; scores contain only one")]
    SingleClassScores,

    #[error("scores file line {line}: {reason}")]
    InvalidScoreRecord { line: usize, reason: String },
}
