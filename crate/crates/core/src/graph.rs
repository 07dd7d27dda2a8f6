//! Windowed service graphs.
//!
//! Traces are assigned to fixed-length time windows by the start of their
//! root span — a trace never straddles windows. Each window aggregates into a
//! [`ServiceGraph`]: lexicographically sorted services, a directed
//! call-count adjacency matrix, six node features per service and
//! four features per directed edge. The symmetric degree-normalized
//! adjacency used by the graph encoder comes from [`normalize_adjacency`];
//! feature standardization and per-edge history assembly round out the
//! pipeline:
//!
//! ```text
//! aggregate_window -> standardize_features -> attach_histories
//! ```
//!
//! Standardization runs before history assembly on purpose: absent windows
//! pad edge histories with zero vectors, and zero is exactly the mean of a
//! standardized feature.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::span::TraceTree;
use crate::tensor::Tensor2;
use crate::Result;

/// Node feature order: mean latency (µs), p95 latency (µs), error rate,
/// throughput (requests/s), fan-in degree, fan-out degree.
pub const NODE_FEATURE_DIM: usize = 6;

/// Edge feature order: call count, mean callee latency (µs), retry count,
/// timeout count.
pub const EDGE_FEATURE_DIM: usize = 4;

/// Standard deviations below this are clamped before dividing, so constant
/// feature columns standardize to zero instead of exploding.
pub const STD_FLOOR: f64 = 1e-8;

/// Feature scaling mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Standardization {
    None,
    Zscore,
}

/// Windowing parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    /// Window length in microseconds; must be positive.
    pub window_length_us: i64,
    /// Number of consecutive windows of edge features fed to the temporal
    /// encoder; must be at least 1.
    pub history_len: usize,
    pub standardization: Standardization,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            window_length_us: 60_000_000,
            history_len: 3,
            standardization: Standardization::Zscore,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_length_us <= 0 {
            return Err(Error::Config(format!(
                "window_length_us must be positive, got {}",
                self.window_length_us
            )));
        }
        if self.history_len == 0 {
            return Err(Error::Config("history_len must be at least 1".into()));
        }
        Ok(())
    }

    /// Seconds per window, used for throughput features.
    pub fn window_seconds(&self) -> f64 {
        self.window_length_us as f64 / 1e6
    }
}

/// Window index of a trace whose root starts at `root_start_ts`.
pub fn window_of(root_start_ts: i64, window_length_us: i64) -> i64 {
    root_start_ts.div_euclid(window_length_us)
}

/// Bucket trees into windows by root-span start; whole traces, never spans,
/// move between windows.
pub fn partition_into_windows<'a>(
    trees: &'a [TraceTree],
    cfg: &WindowConfig,
) -> BTreeMap<i64, Vec<&'a TraceTree>> {
    let mut windows: BTreeMap<i64, Vec<&TraceTree>> = BTreeMap::new();
    for tree in trees {
        let w = window_of(tree.root().start_ts, cfg.window_length_us);
        windows.entry(w).or_default().push(tree);
    }
    windows
}

/// One window's service graph.
///
/// `services` is sorted lexicographically and indexes both matrices:
/// `a[(i, j)]` counts calls from service `i` to service `j`, and row `i` of
/// `x` holds the node features of service `i`. `edge_series` maps a directed
/// edge to its per-window feature vectors — length 1 straight out of
/// [`aggregate_window`], length `history_len` after [`attach_histories`].
#[derive(Debug, Clone, PartialEq)]
pub struct ServiceGraph {
    window_index: i64,
    services: Vec<String>,
    x: Tensor2,
    a: Tensor2,
    edge_series: BTreeMap<(usize, usize), Vec<Vec<f64>>>,
}

impl ServiceGraph {
    /// Validating constructor; used by aggregation and deserialization.
    pub fn new(
        window_index: i64,
        services: Vec<String>,
        x: Tensor2,
        a: Tensor2,
        edge_series: BTreeMap<(usize, usize), Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let n = services.len();
        if !services.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(
                "services must be sorted and unique".into(),
            ));
        }
        if x.shape() != (n, NODE_FEATURE_DIM) {
            return Err(Error::ShapeMismatch {
                op: "service_graph",
                detail: format!("X is {:?}, want {}x{}", x.shape(), n, NODE_FEATURE_DIM),
            });
        }
        if a.shape() != (n, n) {
            return Err(Error::ShapeMismatch {
                op: "service_graph",
                detail: format!("A is {:?}, want {}x{}", a.shape(), n, n),
            });
        }
        for r in 0..n {
            for c in 0..n {
                if a[(r, c)] < 0.0 {
                    return Err(Error::NegativeAdjacency { row: r, col: c });
                }
            }
        }
        for (&(i, j), vectors) in &edge_series {
            if i >= n || j >= n {
                return Err(Error::Config(format!(
                    "edge ({}, {}) outside the {}-service graph",
                    i, j, n
                )));
            }
            for v in vectors {
                if v.len() != EDGE_FEATURE_DIM {
                    return Err(Error::ShapeMismatch {
                        op: "service_graph",
                        detail: format!("edge vector of length {}, want {}", v.len(), EDGE_FEATURE_DIM),
                    });
                }
                if !v.iter().all(|f| f.is_finite()) {
                    return Err(Error::NonFiniteInput);
                }
            }
        }
        Ok(Self {
            window_index,
            services,
            x,
            a,
            edge_series,
        })
    }

    pub fn window_index(&self) -> i64 {
        self.window_index
    }

    pub fn services(&self) -> &[String] {
        &self.services
    }

    pub fn node_count(&self) -> usize {
        self.services.len()
    }

    pub fn node_index(&self, service: &str) -> Option<usize> {
        self.services.binary_search_by(|s| s.as_str().cmp(service)).ok()
    }

    /// Node feature matrix, `|V| x 6`.
    pub fn x(&self) -> &Tensor2 {
        &self.x
    }

    /// Directed call-count adjacency, `|V| x |V|`.
    pub fn a(&self) -> &Tensor2 {
        &self.a
    }

    pub fn edge_series(&self) -> &BTreeMap<(usize, usize), Vec<Vec<f64>>> {
        &self.edge_series
    }

    fn with_features(
        &self,
        x: Tensor2,
        edge_series: BTreeMap<(usize, usize), Vec<Vec<f64>>>,
    ) -> Self {
        Self {
            window_index: self.window_index,
            services: self.services.clone(),
            x,
            a: self.a.clone(),
            edge_series,
        }
    }
}

// --- serialization ---------------------------------------------------------

/// On-disk shape of a [`ServiceGraph`]: matrices flatten row-major.
#[derive(Serialize, Deserialize)]
struct GraphDoc {
    window_index: i64,
    services: Vec<String>,
    #[serde(rename = "X")]
    x: Vec<f64>,
    #[serde(rename = "A")]
    a: Vec<f64>,
    edge_series: Vec<EdgeSeriesDoc>,
}

#[derive(Serialize, Deserialize)]
struct EdgeSeriesDoc {
    i: usize,
    j: usize,
    vectors: Vec<Vec<f64>>,
}

impl Serialize for ServiceGraph {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        GraphDoc {
            window_index: self.window_index,
            services: self.services.clone(),
            x: self.x.data().to_vec(),
            a: self.a.data().to_vec(),
            edge_series: self
                .edge_series
                .iter()
                .map(|(&(i, j), vectors)| EdgeSeriesDoc {
                    i,
                    j,
                    vectors: vectors.clone(),
                })
                .collect(),
        }
        .serialize(ser)
    }
}

impl<'de> Deserialize<'de> for ServiceGraph {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as DeError;
        let doc = GraphDoc::deserialize(de)?;
        let n = doc.services.len();
        let x = Tensor2::from_vec(n, NODE_FEATURE_DIM, doc.x).map_err(DeError::custom)?;
        let a = Tensor2::from_vec(n, n, doc.a).map_err(DeError::custom)?;
        let mut edge_series = BTreeMap::new();
        for entry in doc.edge_series {
            if edge_series
                .insert((entry.i, entry.j), entry.vectors)
                .is_some()
            {
                return Err(DeError::custom(format!(
                    "duplicate edge ({}, {})",
                    entry.i, entry.j
                )));
            }
        }
        ServiceGraph::new(doc.window_index, doc.services, x, a, edge_series).map_err(DeError::custom)
    }
}

// --- aggregation -----------------------------------------------------------

/// Nearest-rank percentile: element at 1-based rank `ceil(q * n)` of the
/// sorted sample. The sample must be non-empty.
pub(crate) fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Aggregate one window of trace trees into a [`ServiceGraph`].
///
/// Callers partition trees by root-span window first (see
/// [`partition_into_windows`]); an empty window produces a graph with zero
/// services. Edge features describe the callee side of each parent→child
/// call, and `edge_series` holds exactly the current window's vector per
/// present edge.
pub fn aggregate_window(
    trees: &[&TraceTree],
    window_index: i64,
    cfg: &WindowConfig,
) -> Result<ServiceGraph> {
    cfg.validate()?;
    debug_assert!(trees
        .iter()
        .all(|t| window_of(t.root().start_ts, cfg.window_length_us) == window_index));

    let mut services: Vec<String> = trees
        .iter()
        .flat_map(|t| t.spans().map(|s| s.service_name.clone()))
        .collect();
    services.sort();
    services.dedup();
    let index: BTreeMap<&str, usize> = services
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let n = services.len();

    // Per-service accumulators.
    let mut durations: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut errors = vec![0usize; n];
    let mut counts = vec![0usize; n];
    // Per-edge accumulators keyed by (caller, callee).
    struct EdgeAcc {
        calls: f64,
        latency_sum: f64,
        retries: f64,
        timeouts: f64,
    }
    let mut edges: BTreeMap<(usize, usize), EdgeAcc> = BTreeMap::new();
    let mut a = Tensor2::zeros(n, n);

    for tree in trees {
        for span in tree.spans() {
            let i = index[span.service_name.as_str()];
            durations[i].push(span.duration as f64);
            counts[i] += 1;
            if span.is_error() {
                errors[i] += 1;
            }
            for child_id in tree.children_of(&span.span_id) {
                let child = tree.span(child_id).expect("child resolved");
                let j = index[child.service_name.as_str()];
                a[(i, j)] += 1.0;
                let acc = edges.entry((i, j)).or_insert(EdgeAcc {
                    calls: 0.0,
                    latency_sum: 0.0,
                    retries: 0.0,
                    timeouts: 0.0,
                });
                acc.calls += 1.0;
                acc.latency_sum += child.duration as f64;
                acc.retries += child.retry_count() as f64;
                if child.is_timeout() {
                    acc.timeouts += 1.0;
                }
            }
        }
    }

    let secs = cfg.window_seconds();
    let mut x = Tensor2::zeros(n, NODE_FEATURE_DIM);
    for i in 0..n {
        let mut sorted = durations[i].clone();
        sorted.sort_by(|p, q| p.partial_cmp(q).expect("durations are finite"));
        let count = counts[i] as f64;
        x[(i, 0)] = sorted.iter().sum::<f64>() / count;
        x[(i, 1)] = nearest_rank(&sorted, 0.95);
        x[(i, 2)] = errors[i] as f64 / count;
        x[(i, 3)] = count / secs;
        x[(i, 4)] = (0..n).filter(|&j| a[(j, i)] > 0.0).count() as f64;
        x[(i, 5)] = (0..n).filter(|&j| a[(i, j)] > 0.0).count() as f64;
    }

    let edge_series = edges
        .into_iter()
        .map(|(key, acc)| {
            (
                key,
                vec![vec![
                    acc.calls,
                    acc.latency_sum / acc.calls,
                    acc.retries,
                    acc.timeouts,
                ]],
            )
        })
        .collect();

    ServiceGraph::new(window_index, services, x, a, edge_series)
}

// --- adjacency normalization ----------------------------------------------

/// Symmetric degree normalization with self-connections.
///
/// The directed call-count matrix is binarized, given self-loops, and
/// symmetrized (an edge in either direction connects both nodes); the result
/// is `D^{-1/2} (A~ ) D^{-1/2}` where `D` holds the row sums. Output entries
/// are `1 / sqrt(d_i * d_j)` on connections and 0 elsewhere, the matrix is
/// exactly symmetric, and its eigenvalues lie in `[-1, 1]`.
pub fn normalize_adjacency(a: &Tensor2) -> Result<Tensor2> {
    let (rows, cols) = a.shape();
    if rows != cols {
        return Err(Error::NonSquareAdjacency { rows, cols });
    }
    for r in 0..rows {
        for c in 0..cols {
            if a[(r, c)] < 0.0 {
                return Err(Error::NegativeAdjacency { row: r, col: c });
            }
        }
    }
    let n = rows;
    // Binarize + self-loops + symmetrize in one step.
    let connected = |i: usize, j: usize| i == j || a[(i, j)] > 0.0 || a[(j, i)] > 0.0;
    let mut degree = vec![0.0f64; n];
    for (i, d) in degree.iter_mut().enumerate() {
        *d = (0..n).filter(|&j| connected(i, j)).count() as f64;
    }
    let out = Tensor2::from_fn(n, n, |i, j| {
        if connected(i, j) {
            1.0 / (degree[i] * degree[j]).sqrt()
        } else {
            0.0
        }
    });
    Ok(out)
}

// --- standardization -------------------------------------------------------

/// Per-column means and (floored) standard deviations for node and edge
/// features, frozen from the training windows and reused everywhere else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub node_mean: Vec<f64>,
    pub node_std: Vec<f64>,
    pub edge_mean: Vec<f64>,
    pub edge_std: Vec<f64>,
}

impl FeatureStats {
    pub fn validate(&self) -> Result<()> {
        for (len, want) in [
            (self.node_mean.len(), NODE_FEATURE_DIM),
            (self.node_std.len(), NODE_FEATURE_DIM),
            (self.edge_mean.len(), EDGE_FEATURE_DIM),
            (self.edge_std.len(), EDGE_FEATURE_DIM),
        ] {
            if len != want {
                return Err(Error::StatsSchemaMismatch {
                    expected: want,
                    got: len,
                });
            }
        }
        Ok(())
    }
}

/// Population mean and floored standard deviation per column of `samples`.
fn column_stats(samples: &[&[f64]], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len() as f64;
    if samples.is_empty() {
        // No samples: identity scaling so later data passes through unchanged.
        return (vec![0.0; dim], vec![1.0; dim]);
    }
    let mut mean = vec![0.0; dim];
    for row in samples {
        for (m, v) in mean.iter_mut().zip(*row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for row in samples {
        for ((v, m), x) in var.iter_mut().zip(&mean).zip(*row) {
            *v += (x - m) * (x - m);
        }
    }
    let std = var
        .iter()
        .map(|v| (v / n).sqrt().max(STD_FLOOR))
        .collect();
    (mean, std)
}

/// Compute standardization statistics over all node rows and all edge
/// vectors of `graphs`. Needs at least one node row; a corpus with no edges
/// falls back to identity scaling for edge features.
pub fn compute_feature_stats(graphs: &[ServiceGraph]) -> Result<FeatureStats> {
    let node_rows: Vec<&[f64]> = graphs
        .iter()
        .flat_map(|g| (0..g.node_count()).map(move |i| g.x().row(i)))
        .collect();
    if node_rows.is_empty() {
        return Err(Error::Config(
            "feature stats need at least one node row across the training graphs".into(),
        ));
    }
    let edge_rows: Vec<&[f64]> = graphs
        .iter()
        .flat_map(|g| g.edge_series().values().flatten().map(Vec::as_slice))
        .collect();
    let (node_mean, node_std) = column_stats(&node_rows, NODE_FEATURE_DIM);
    let (edge_mean, edge_std) = column_stats(&edge_rows, EDGE_FEATURE_DIM);
    Ok(FeatureStats {
        node_mean,
        node_std,
        edge_mean,
        edge_std,
    })
}

/// Standardize node and edge features of every graph to z-scores.
///
/// With `stats = None` the statistics are computed from `graphs` (the
/// training call); passing stored stats applies the frozen training scaling
/// to validation/test windows. Returns the transformed graphs and the stats
/// that were applied. Run this *before* [`attach_histories`] so that history
/// zero-padding coincides with the standardized mean.
pub fn standardize_features(
    graphs: &[ServiceGraph],
    stats: Option<&FeatureStats>,
) -> Result<(Vec<ServiceGraph>, FeatureStats)> {
    let stats = match stats {
        Some(s) => {
            s.validate()?;
            s.clone()
        }
        None => compute_feature_stats(graphs)?,
    };
    let out = graphs
        .iter()
        .map(|g| {
            let x = Tensor2::from_fn(g.node_count(), NODE_FEATURE_DIM, |r, c| {
                (g.x()[(r, c)] - stats.node_mean[c]) / stats.node_std[c]
            });
            let edge_series = g
                .edge_series()
                .iter()
                .map(|(&key, vectors)| {
                    let scaled = vectors
                        .iter()
                        .map(|v| {
                            v.iter()
                                .enumerate()
                                .map(|(c, val)| (val - stats.edge_mean[c]) / stats.edge_std[c])
                                .collect()
                        })
                        .collect();
                    (key, scaled)
                })
                .collect();
            g.with_features(x, edge_series)
        })
        .collect();
    Ok((out, stats))
}

// --- edge history ----------------------------------------------------------

/// Assemble per-edge history for the *latest* of `graphs`.
///
/// `graphs` must be single-window graphs (edge series of length 1, as
/// produced by aggregation) with contiguous ascending window indices. For
/// every directed service pair that exists in the latest graph and carries
/// an edge in at least one input window, the result holds one feature vector
/// per window — the window's own vector where the edge was present, a zero
/// vector where it was not.
pub fn build_edge_history(
    graphs: &[ServiceGraph],
) -> Result<BTreeMap<(usize, usize), Vec<Vec<f64>>>> {
    let latest = graphs.last().ok_or(Error::EmptyTrace)?;
    for pair in graphs.windows(2) {
        let expected = pair[0].window_index() + 1;
        if pair[1].window_index() != expected {
            return Err(Error::NonContiguousWindows {
                expected,
                got: pair[1].window_index(),
            });
        }
    }
    for g in graphs {
        if let Some(bad) = g.edge_series().values().find(|v| v.len() != 1) {
            return Err(Error::RaggedEdgeHistory {
                expected: 1,
                got: bad.len(),
            });
        }
    }

    let t = graphs.len();
    let mut out: BTreeMap<(usize, usize), Vec<Vec<f64>>> = BTreeMap::new();
    for (step, g) in graphs.iter().enumerate() {
        for (&(i, j), vectors) in g.edge_series() {
            // Rekey through service names; drop edges whose endpoints left
            // the latest window (they cannot reach any current node).
            let (Some(li), Some(lj)) = (
                latest.node_index(&g.services()[i]),
                latest.node_index(&g.services()[j]),
            ) else {
                continue;
            };
            let seq = out
                .entry((li, lj))
                .or_insert_with(|| vec![vec![0.0; EDGE_FEATURE_DIM]; t]);
            seq[step] = vectors[0].clone();
        }
    }
    Ok(out)
}

/// Replace each graph's edge series with its `history_len`-window history.
///
/// Window `w` sees the graphs `w - history_len + 1 ..= w`; windows earlier
/// than the corpus start contribute zero vectors, so every sequence has
/// exactly `history_len` entries.
pub fn attach_histories(graphs: &[ServiceGraph], history_len: usize) -> Result<Vec<ServiceGraph>> {
    if history_len == 0 {
        return Err(Error::Config("history_len must be at least 1".into()));
    }
    for pair in graphs.windows(2) {
        let expected = pair[0].window_index() + 1;
        if pair[1].window_index() != expected {
            return Err(Error::NonContiguousWindows {
                expected,
                got: pair[1].window_index(),
            });
        }
    }
    let mut out = Vec::with_capacity(graphs.len());
    for (w, g) in graphs.iter().enumerate() {
        let from = (w + 1).saturating_sub(history_len);
        let history = build_edge_history(&graphs[from..=w])?;
        let pad = history_len - (w - from + 1);
        let padded = history
            .into_iter()
            .map(|(key, mut seq)| {
                if pad > 0 {
                    let mut full = vec![vec![0.0; EDGE_FEATURE_DIM]; pad];
                    full.append(&mut seq);
                    (key, full)
                } else {
                    (key, seq)
                }
            })
            .collect();
        out.push(g.with_features(g.x().clone(), padded));
    }
    Ok(out)
}
