//! One-class training and anomaly detection.
//!
//! Training pulls every node embedding toward a fixed centroid `mu`: after
//! the initial forward pass over the training windows, `mu` is the mean of
//! all node rows and is then frozen, and full-batch gradient descent
//! minimizes the mean squared distance to it (plus L2 decay on the weight
//! matrices). Freezing prevents the degenerate solution where the centroid
//! chases the embeddings. A node's anomaly score is its squared distance
//! from the centroid; a path's score is the mean over its hops. The
//! detection threshold is a quantile of scores from normal windows.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::graph::{nearest_rank, ServiceGraph};
use crate::jsonfmt::fmt_f64;
use crate::model::{
    build_forward, forward, is_weight_matrix, stage_params, ModelConfig, ModelDoc, ModelParams,
};
use crate::span::{CallPath, TraceTree};
use crate::tape::Tape;
use crate::tensor::Tensor2;
use crate::Result;

/// Gradient batching strategy. Only full-batch descent is implemented; the
/// variant exists so configurations name it explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchMode {
    #[default]
    Full,
}

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// L2 penalty coefficient on the weight matrices.
    pub weight_decay: f64,
    pub batch: BatchMode,
    /// Reserved for stochastic batching; full-batch descent ignores it.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            batch: BatchMode::Full,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be a positive finite number, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be a non-negative finite number, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Frozen center of the normal-behavior embedding cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Centroid {
    pub mu: Vec<f64>,
    /// Set when the centroid is final; frozen centroids are never updated.
    pub frozen: bool,
}

impl Centroid {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(())
    }
}

/// Mean of all node embedding rows across the given windows, frozen.
/// Windows without nodes contribute nothing; at least one row is required.
pub fn compute_centroid(embeddings: &[Tensor2]) -> Result<Centroid> {
    let dim = match embeddings.iter().find(|u| u.rows() > 0) {
        Some(u) => u.cols(),
        None => return Err(Error::EmptyCentroidInput),
    };
    let mut mu = vec![0.0; dim];
    let mut n = 0usize;
    for u in embeddings {
        if u.rows() == 0 {
            continue;
        }
        if u.cols() != dim {
            return Err(Error::ShapeMismatch {
                op: "compute_centroid",
                detail: format!("embedding widths differ: {} vs {}", u.cols(), dim),
            });
        }
        for r in 0..u.rows() {
            for (c, acc) in mu.iter_mut().enumerate() {
                *acc += u[(r, c)];
            }
        }
        n += u.rows();
    }
    for acc in &mut mu {
        *acc /= n as f64;
    }
    Ok(Centroid { mu, frozen: true })
}

/// Squared Euclidean distance from the centroid.
pub fn node_score(u_i: &[f64], centroid: &Centroid) -> Result<f64> {
    if u_i.len() != centroid.dim() {
        return Err(Error::ShapeMismatch {
            op: "node_score",
            detail: format!("embedding has {} dims, centroid {}", u_i.len(), centroid.dim()),
        });
    }
    Ok(u_i
        .iter()
        .zip(&centroid.mu)
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// Mean node score along the path. Each hop counts, so a service that
/// appears twice contributes its score twice.
pub fn path_score(path: &CallPath, node_scores: &BTreeMap<String, f64>) -> Result<f64> {
    if path.is_empty() {
        return Err(Error::Config("cannot score an empty path".into()));
    }
    let mut sum = 0.0;
    for svc in &path.services {
        sum += node_scores
            .get(svc)
            .ok_or_else(|| Error::UnknownService { service: svc.clone() })?;
    }
    Ok(sum / path.services.len() as f64)
}

/// Score every node of one window: forward pass, then per-row distance.
pub fn score_window(
    graph: &ServiceGraph,
    params: &ModelParams,
    cfg: &ModelConfig,
    centroid: &Centroid,
) -> Result<BTreeMap<String, f64>> {
    let emb = forward(graph, params, cfg)?;
    let mut out = BTreeMap::new();
    for (i, svc) in graph.services().iter().enumerate() {
        out.insert(svc.clone(), node_score(emb.u.row(i), centroid)?);
    }
    Ok(out)
}

/// Score several windows; read-only over the model, so windows run in
/// parallel with deterministic output order.
pub fn score_windows(
    graphs: &[ServiceGraph],
    params: &ModelParams,
    cfg: &ModelConfig,
    centroid: &Centroid,
) -> Result<Vec<BTreeMap<String, f64>>> {
    use rayon::prelude::*;
    graphs
        .par_iter()
        .map(|g| score_window(g, params, cfg, centroid))
        .collect()
}

/// Nearest-rank quantile of a score sample, used as the detection threshold.
pub fn select_threshold(scores: &[f64], q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidQuantile { q });
    }
    if scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(nearest_rank(&sorted, q))
}

/// One row of the per-epoch training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    /// Full objective: mean score plus the decay term.
    pub loss: f64,
    /// Mean squared distance of all training nodes from the centroid.
    pub mean_score: f64,
    /// Frobenius norm of all weight matrices stacked.
    pub weight_norm: f64,
}

/// Write the training log as CSV with round-trippable float formatting.
pub fn write_training_trace<W: Write>(w: W, rows: &[TraceRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["epoch", "loss", "mean_score", "weight_norm"])?;
    for r in rows {
        wtr.write_record([
            r.epoch.to_string(),
            fmt_f64(r.loss),
            fmt_f64(r.mean_score),
            fmt_f64(r.weight_norm),
        ])?;
    }
    wtr.flush().map_err(Error::Io)?;
    Ok(())
}

/// Result of [`train`]: final parameters, the frozen centroid they were
/// pulled toward, and the per-epoch log (epoch 0 is the pre-update state,
/// the last row the final state — `epochs + 1` rows).
pub struct TrainOutcome {
    pub params: ModelParams,
    pub centroid: Centroid,
    pub trace: Vec<TraceRow>,
}

/// Train the encoder on normal windows with full-batch gradient descent.
///
/// The centroid comes from the initial forward pass and never moves. With
/// `epochs = 0` the returned parameters equal the seeded initialization
/// bitwise; with `weight_decay = 0` the logged loss equals the mean score
/// exactly. A non-finite loss aborts with the offending epoch.
pub fn train(
    graphs: &[ServiceGraph],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    let mut params = ModelParams::init(model_cfg)?;

    let initial: Vec<Tensor2> = graphs
        .iter()
        .map(|g| forward(g, &params, model_cfg).map(|e| e.u))
        .collect::<Result<_>>()?;
    let centroid = compute_centroid(&initial)?;
    let n_nodes: usize = graphs.iter().map(|g| g.node_count()).sum();

    let mut trace = Vec::with_capacity(train_cfg.epochs + 1);
    for step in 0..=train_cfg.epochs {
        let (loss, mean_score, grads) = run_epoch(
            graphs,
            &params,
            model_cfg,
            train_cfg,
            &centroid,
            n_nodes,
            step < train_cfg.epochs,
        )
        .map_err(|e| match e {
            Error::NonFinite { .. } | Error::NonFiniteInput => Error::DivergedAtEpoch { epoch: step },
            other => other,
        })?;
        let weight_norm = params
            .named()
            .iter()
            .filter(|(name, _)| is_weight_matrix(name))
            .map(|(_, t)| t.frobenius_sq())
            .sum::<f64>()
            .sqrt();
        trace.push(TraceRow {
            epoch: step,
            loss,
            mean_score,
            weight_norm,
        });
        if let Some(grads) = grads {
            for ((name, tensor), grad) in params.named_mut().into_iter().zip(&grads) {
                debug_assert_eq!(tensor.shape(), grad.shape(), "{}", name);
                tensor.add_scaled(grad, -train_cfg.learning_rate);
            }
            if params.named().iter().any(|(_, t)| !t.is_finite()) {
                return Err(Error::DivergedAtEpoch { epoch: step });
            }
        }
    }
    Ok(TrainOutcome {
        params,
        centroid,
        trace,
    })
}

/// Build the full-batch loss on a fresh tape; backpropagate unless this is
/// the final evaluation-only pass. Returns `(loss, mean_score, gradients)`
/// with gradients in [`ModelParams::named`] order.
fn run_epoch(
    graphs: &[ServiceGraph],
    params: &ModelParams,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    centroid: &Centroid,
    n_nodes: usize,
    with_grads: bool,
) -> Result<(f64, f64, Option<Vec<Tensor2>>)> {
    if n_nodes == 0 {
        return Err(Error::EmptyCentroidInput);
    }
    let mut tape = Tape::new();
    let nodes = stage_params(&mut tape, params)?;
    let mu_row = tape.leaf(Tensor2::from_vec(1, centroid.dim(), centroid.mu.clone())?)?;

    let mut total: Option<crate::tape::NodeId> = None;
    for g in graphs {
        if g.node_count() == 0 {
            continue;
        }
        let fwd = build_forward(&mut tape, g, &nodes, model_cfg)?;
        let ones = tape.leaf(Tensor2::from_fn(g.node_count(), 1, |_, _| 1.0))?;
        let mu_rows = tape.matmul(ones, mu_row)?;
        let diff = tape.sub(fwd.u, mu_rows)?;
        let ss = tape.sum_sq(diff)?;
        total = Some(match total {
            Some(t) => tape.add(t, ss)?,
            None => ss,
        });
    }
    let total = total.ok_or(Error::EmptyCentroidInput)?;
    let mean = tape.scalar_mul(total, 1.0 / n_nodes as f64)?;
    let mean_score = tape.value(mean)[(0, 0)];

    let loss_node = if train_cfg.weight_decay > 0.0 {
        let mut decay: Option<crate::tape::NodeId> = None;
        for (name, id) in nodes.ordered() {
            if !is_weight_matrix(&name) {
                continue;
            }
            let ss = tape.sum_sq(id)?;
            decay = Some(match decay {
                Some(d) => tape.add(d, ss)?,
                None => ss,
            });
        }
        match decay {
            Some(d) => {
                let scaled = tape.scalar_mul(d, train_cfg.weight_decay)?;
                tape.add(mean, scaled)?
            }
            None => mean,
        }
    } else {
        mean
    };
    let loss = tape.value(loss_node)[(0, 0)];

    if !with_grads {
        return Ok((loss, mean_score, None));
    }
    tape.backward(loss_node)?;
    let grads = nodes
        .ordered()
        .into_iter()
        .map(|(_, id)| tape.grad(id).cloned())
        .collect::<Result<Vec<_>>>()?;
    Ok((loss, mean_score, Some(grads)))
}

/// Everything needed to score new windows.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedDetector {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub centroid: Centroid,
    pub threshold: f64,
}

/// On-disk form of a trained detector: the model document plus centroid and
/// threshold, flattened into one object.
#[derive(Serialize, Deserialize)]
pub struct DetectorDoc {
    #[serde(flatten)]
    pub model: ModelDoc,
    pub centroid: Centroid,
    pub threshold: f64,
}

impl TrainedDetector {
    pub fn to_doc(&self) -> DetectorDoc {
        DetectorDoc {
            model: ModelDoc::pack(&self.config, &self.params),
            centroid: self.centroid.clone(),
            threshold: self.threshold,
        }
    }

    pub fn from_doc(doc: &DetectorDoc) -> Result<Self> {
        let (config, params) = doc.model.unpack()?;
        doc.centroid.validate()?;
        if !doc.threshold.is_finite() {
            return Err(Error::NonFiniteInput);
        }
        Ok(Self {
            config,
            params,
            centroid: doc.centroid.clone(),
            threshold: doc.threshold,
        })
    }
}

/// Per-window detection verdict: node scores, flagged services, and ranked
/// candidate propagation paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub window_index: i64,
    pub node_scores: BTreeMap<String, f64>,
    pub threshold: f64,
    /// Services whose score strictly exceeds the threshold.
    pub flagged_nodes: Vec<String>,
    pub ranked_paths: Vec<RankedPath>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPath {
    pub path: CallPath,
    pub score: f64,
}

/// Rank candidate root-cause paths for one window.
///
/// Scores every node, flags those above the threshold, extracts all
/// root-to-leaf call paths from the window's traces, deduplicates them by
/// service sequence (first occurrence wins), scores each, and keeps the
/// `top_k` best. Ordering: score descending, then shorter path, then
/// lexicographic services.
pub fn trace_root_cause(
    graph: &ServiceGraph,
    trees: &[TraceTree],
    params: &ModelParams,
    cfg: &ModelConfig,
    centroid: &Centroid,
    threshold: f64,
    top_k: usize,
) -> Result<ScoreReport> {
    let node_scores = score_window(graph, params, cfg, centroid)?;
    let flagged_nodes: Vec<String> = node_scores
        .iter()
        .filter(|(_, &s)| s > threshold)
        .map(|(svc, _)| svc.clone())
        .collect();

    let mut seen: std::collections::BTreeSet<Vec<String>> = std::collections::BTreeSet::new();
    let mut ranked: Vec<RankedPath> = Vec::new();
    for tree in trees {
        for path in crate::span::extract_call_paths(tree) {
            let path = path.with_window(graph.window_index());
            if !seen.insert(path.services.clone()) {
                continue;
            }
            let score = path_score(&path, &node_scores)?;
            ranked.push(RankedPath { path, score });
        }
    }
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.path.services.len().cmp(&b.path.services.len()))
            .then(a.path.services.cmp(&b.path.services))
    });
    ranked.truncate(top_k);

    Ok(ScoreReport {
        window_index: graph.window_index(),
        node_scores,
        threshold,
        flagged_nodes,
        ranked_paths: ranked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{EDGE_FEATURE_DIM, NODE_FEATURE_DIM};
    use crate::span::{build_trace_tree, SpanRecord};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap as Map;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            gcn_layers: 2,
            hidden_dim: 4,
            gru_hidden: 3,
            history_len: 2,
            seed: 17,
            ..ModelConfig::default()
        }
    }

    fn random_graph(cfg: &ModelConfig, n: usize, window: i64, seed: u64) -> ServiceGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let services: Vec<String> = (0..n).map(|i| format!("svc{:02}", i)).collect();
        let mut a = Tensor2::zeros(n, n);
        let mut series = Map::new();
        for i in 0..n.saturating_sub(1) {
            a[(i, i + 1)] = rng.gen_range(1..5) as f64;
            series.insert(
                (i, i + 1),
                (0..cfg.history_len)
                    .map(|_| (0..EDGE_FEATURE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect(),
            );
        }
        let x = Tensor2::from_fn(n, NODE_FEATURE_DIM, |_, _| rng.gen_range(-1.0..1.0));
        ServiceGraph::new(window, services, x, a, series).unwrap()
    }

    #[test]
    fn centroid_of_identical_rows_is_that_row() {
        let u = Tensor2::from_fn(3, 4, |_, c| c as f64 + 0.5);
        let c = compute_centroid(&[u]).unwrap();
        assert_eq!(c.mu, vec![0.5, 1.5, 2.5, 3.5]);
        assert!(c.frozen);
    }

    #[test]
    fn centroid_averages_rows_across_windows() {
        let u1 = Tensor2::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let u2 = Tensor2::from_vec(1, 2, vec![2.0, 2.0]).unwrap();
        let c = compute_centroid(&[u1, u2]).unwrap();
        assert_eq!(c.mu, vec![1.0, 1.0]);
    }

    #[test]
    fn centroid_of_single_row_scores_that_row_zero() {
        let u = Tensor2::from_vec(1, 3, vec![0.3, -0.7, 2.0]).unwrap();
        let c = compute_centroid(std::slice::from_ref(&u)).unwrap();
        assert_eq!(node_score(u.row(0), &c).unwrap(), 0.0);
    }

    #[test]
    fn centroid_requires_at_least_one_row() {
        let empty = Tensor2::zeros(0, 4);
        assert!(matches!(
            compute_centroid(&[empty]),
            Err(Error::EmptyCentroidInput)
        ));
        assert!(matches!(compute_centroid(&[]), Err(Error::EmptyCentroidInput)));
    }

    #[test]
    fn node_score_is_squared_distance() {
        let c = Centroid { mu: vec![1.0, 1.0, 1.0], frozen: true };
        assert_eq!(node_score(&[1.0, 1.0, 1.0], &c).unwrap(), 0.0);
        assert_eq!(node_score(&[4.0, 5.0, 1.0], &c).unwrap(), 25.0);
        assert!(node_score(&[1.0, 2.0], &c).is_err());
    }

    #[test]
    fn doubling_the_deviation_quadruples_the_score() {
        let c = Centroid { mu: vec![0.25, -0.5], frozen: true };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let d: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let near: Vec<f64> = c.mu.iter().zip(&d).map(|(m, x)| m + x).collect();
            let far: Vec<f64> = c.mu.iter().zip(&d).map(|(m, x)| m + 2.0 * x).collect();
            let s1 = node_score(&near, &c).unwrap();
            let s2 = node_score(&far, &c).unwrap();
            assert!(s1 >= 0.0);
            assert_eq!(s2, 4.0 * s1);
        }
    }

    fn scores_of(pairs: &[(&str, f64)]) -> Map<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn path_of(services: &[&str]) -> CallPath {
        CallPath {
            services: services.iter().map(|s| s.to_string()).collect(),
            span_ids: services.iter().map(|s| format!("span-{}", s)).collect(),
            window_index: 0,
        }
    }

    #[test]
    fn path_score_is_mean_over_hops() {
        let scores = scores_of(&[("a", 1.0), ("b", 2.0), ("c", 3.0)]);
        assert_eq!(path_score(&path_of(&["a"]), &scores).unwrap(), 1.0);
        assert_eq!(path_score(&path_of(&["a", "b", "c"]), &scores).unwrap(), 2.0);
        let zeros = scores_of(&[("a", 0.0), ("b", 0.0)]);
        assert_eq!(path_score(&path_of(&["a", "b"]), &zeros).unwrap(), 0.0);
    }

    #[test]
    fn repeated_service_counts_once_per_hop() {
        let scores = scores_of(&[("a", 1.0), ("b", 4.0)]);
        assert_eq!(path_score(&path_of(&["a", "b", "a"]), &scores).unwrap(), 2.0);
    }

    #[test]
    fn path_score_requires_every_hop_scored() {
        let scores = scores_of(&[("a", 1.0)]);
        assert!(matches!(
            path_score(&path_of(&["a", "ghost"]), &scores),
            Err(Error::UnknownService { .. })
        ));
    }

    #[test]
    fn path_score_is_bounded_by_member_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..30 {
            let names = ["a", "b", "c", "d"];
            let scores: Map<String, f64> = names
                .iter()
                .map(|n| (n.to_string(), rng.gen_range(0.0..10.0)))
                .collect();
            let len = rng.gen_range(1..=4usize);
            let hops: Vec<&str> = (0..len).map(|_| names[rng.gen_range(0..4)]).collect();
            let p = path_of(&hops);
            let s = path_score(&p, &scores).unwrap();
            let member: Vec<f64> = hops.iter().map(|h| scores[*h]).collect();
            let lo = member.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = member.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(s >= lo - 1e-12 && s <= hi + 1e-12);
        }
    }

    #[test]
    fn shifting_all_scores_shifts_path_scores_and_keeps_ranking() {
        let scores = scores_of(&[("a", 1.0), ("b", 5.0), ("c", 2.0)]);
        let shifted: Map<String, f64> = scores.iter().map(|(k, v)| (k.clone(), v + 3.0)).collect();
        let paths = [path_of(&["a", "b"]), path_of(&["c"]), path_of(&["b", "c", "a"])];
        let base: Vec<f64> = paths.iter().map(|p| path_score(p, &scores).unwrap()).collect();
        let moved: Vec<f64> = paths.iter().map(|p| path_score(p, &shifted).unwrap()).collect();
        for (b, m) in base.iter().zip(&moved) {
            assert!((m - b - 3.0).abs() <= 1e-12);
        }
        let order = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&i, &j| v[j].total_cmp(&v[i]));
            idx
        };
        assert_eq!(order(&base), order(&moved));
    }

    #[test]
    fn threshold_follows_nearest_rank() {
        assert_eq!(select_threshold(&[0.0, 0.0, 0.0], 0.99).unwrap(), 0.0);
        let hundred: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert_eq!(select_threshold(&hundred, 0.95).unwrap(), 95.0);
        assert_eq!(select_threshold(&[3.0, 1.0, 2.0], 0.5).unwrap(), 2.0);
    }

    #[test]
    fn threshold_validates_inputs() {
        assert!(matches!(
            select_threshold(&[1.0], 0.0),
            Err(Error::InvalidQuantile { .. })
        ));
        assert!(matches!(
            select_threshold(&[1.0], 1.0),
            Err(Error::InvalidQuantile { .. })
        ));
        assert!(matches!(select_threshold(&[], 0.5), Err(Error::EmptyScores)));
    }

    #[test]
    fn zero_epochs_returns_seeded_initialization_bitwise() {
        let cfg = small_cfg();
        let graphs: Vec<ServiceGraph> = (0..3).map(|w| random_graph(&cfg, 4, w, w as u64)).collect();
        let tc = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let out = train(&graphs, &cfg, &tc).unwrap();
        assert_eq!(out.params, ModelParams::init(&cfg).unwrap());
        assert_eq!(out.trace.len(), 1);
    }

    #[test]
    fn zero_decay_makes_loss_equal_mean_score() {
        let cfg = small_cfg();
        let graphs: Vec<ServiceGraph> = (0..2).map(|w| random_graph(&cfg, 3, w, 10 + w as u64)).collect();
        let tc = TrainConfig { epochs: 5, weight_decay: 0.0, ..TrainConfig::default() };
        let out = train(&graphs, &cfg, &tc).unwrap();
        assert_eq!(out.trace.len(), 6);
        for row in &out.trace {
            assert_eq!(row.loss, row.mean_score);
        }
    }

    #[test]
    fn initial_loss_matches_brute_force_scalar_mean() {
        let cfg = small_cfg();
        let graphs: Vec<ServiceGraph> = (0..3).map(|w| random_graph(&cfg, 4, w, 30 + w as u64)).collect();
        let tc = TrainConfig { epochs: 0, weight_decay: 0.0, ..TrainConfig::default() };
        let out = train(&graphs, &cfg, &tc).unwrap();

        // Independent scalar pass: same initialization, plain loops.
        let params = ModelParams::init(&cfg).unwrap();
        let mut sum = 0.0;
        let mut n = 0usize;
        for g in &graphs {
            let emb = forward(g, &params, &cfg).unwrap();
            for r in 0..emb.u.rows() {
                let mut s = 0.0;
                for c in 0..emb.u.cols() {
                    let d = emb.u[(r, c)] - out.centroid.mu[c];
                    s += d * d;
                }
                sum += s;
                n += 1;
            }
        }
        let brute = sum / n as f64;
        assert!((out.trace[0].loss - brute).abs() <= 1e-12, "{} vs {}", out.trace[0].loss, brute);
    }

    #[test]
    fn training_reduces_mean_score_on_fixed_workload() {
        let cfg = small_cfg();
        let graphs: Vec<ServiceGraph> = (0..4).map(|w| random_graph(&cfg, 5, w, 700 + w as u64)).collect();
        let tc = TrainConfig { epochs: 10, learning_rate: 1e-3, ..TrainConfig::default() };
        let out = train(&graphs, &cfg, &tc).unwrap();
        let first = out.trace.first().unwrap().mean_score;
        let last = out.trace.last().unwrap().mean_score;
        assert!(last < first, "no descent: {} -> {}", first, last);
    }

    #[test]
    fn huge_learning_rate_reports_divergence_epoch() {
        let cfg = small_cfg();
        let graphs = vec![random_graph(&cfg, 4, 0, 3)];
        let tc = TrainConfig { epochs: 20, learning_rate: 1e150, ..TrainConfig::default() };
        match train(&graphs, &cfg, &tc) {
            Err(Error::DivergedAtEpoch { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|_| ()).err()),
        }
    }

    #[test]
    fn training_trace_csv_has_expected_columns() {
        let rows = vec![
            TraceRow { epoch: 0, loss: 1.5, mean_score: 1.25, weight_norm: 3.0 },
            TraceRow { epoch: 1, loss: 1.25, mean_score: 1.0, weight_norm: 2.5 },
        ];
        let mut buf = Vec::new();
        write_training_trace(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "epoch,loss,mean_score,weight_norm");
        let first = lines.next().unwrap();
        assert!(first.starts_with("0,1.5"), "{}", first);
    }

    #[test]
    fn detector_doc_round_trips_bit_exactly() {
        let cfg = small_cfg();
        let det = TrainedDetector {
            params: ModelParams::init(&cfg).unwrap(),
            config: cfg,
            centroid: Centroid { mu: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7], frozen: true },
            threshold: 1.0 / 3.0,
        };
        let json = crate::jsonfmt::to_string(&det.to_doc()).unwrap();
        let back: DetectorDoc = serde_json::from_str(&json).unwrap();
        let det2 = TrainedDetector::from_doc(&back).unwrap();
        assert_eq!(det, det2);
    }

    fn span(trace: &str, id: &str, parent: Option<&str>, svc: &str, start: i64) -> SpanRecord {
        SpanRecord {
            trace_id: trace.into(),
            span_id: id.into(),
            parent_span_id: parent.map(|p| p.to_string()),
            service_name: svc.into(),
            operation_name: "op".into(),
            start_ts: start,
            duration: 10,
            tags: Map::new(),
            logs: vec![],
        }
    }

    fn tree(spans: Vec<SpanRecord>) -> TraceTree {
        build_trace_tree(&spans).unwrap()
    }

    /// Graph whose services cover the fixture trees, with per-service
    /// feature rows spread out so scores differ.
    fn graph_covering(services: &[&str], cfg: &ModelConfig) -> ServiceGraph {
        let mut sorted: Vec<String> = services.iter().map(|s| s.to_string()).collect();
        sorted.sort();
        sorted.dedup();
        let n = sorted.len();
        let x = Tensor2::from_fn(n, NODE_FEATURE_DIM, |r, c| (r * 7 + c) as f64 * 0.3 - 1.0);
        let mut a = Tensor2::zeros(n, n);
        let mut series = Map::new();
        if n > 1 {
            a[(0, 1)] = 1.0;
            series.insert(
                (0, 1),
                vec![vec![0.2; EDGE_FEATURE_DIM]; cfg.history_len],
            );
        }
        ServiceGraph::new(5, sorted, x, a, series).unwrap()
    }

    #[test]
    fn root_cause_report_flags_dedupes_and_ranks() {
        let cfg = small_cfg();
        let params = ModelParams::init(&cfg).unwrap();
        let trees = vec![
            tree(vec![
                span("t1", "r", None, "api", 0),
                span("t1", "c1", Some("r"), "db", 1),
            ]),
            // Same service sequence as t1 through different spans.
            tree(vec![
                span("t2", "r", None, "api", 0),
                span("t2", "c9", Some("r"), "db", 3),
            ]),
            tree(vec![
                span("t3", "r", None, "api", 0),
                span("t3", "c1", Some("r"), "cache", 1),
            ]),
        ];
        let graph = graph_covering(&["api", "db", "cache"], &cfg);
        let centroid = Centroid { mu: vec![0.0; cfg.embedding_dim()], frozen: true };
        let report =
            trace_root_cause(&graph, &trees, &params, &cfg, &centroid, 0.0, 10).unwrap();

        assert_eq!(report.window_index, 5);
        assert_eq!(report.node_scores.len(), 3);
        // Duplicate api->db collapsed: two unique sequences remain.
        assert_eq!(report.ranked_paths.len(), 2);
        let sequences: Vec<&Vec<String>> =
            report.ranked_paths.iter().map(|r| &r.path.services).collect();
        assert!(sequences.contains(&&vec!["api".to_string(), "db".to_string()]));
        // Scores are positive against a zero centroid, so with threshold 0
        // every service is flagged, and flagged is a subset of scored.
        assert_eq!(report.flagged_nodes.len(), 3);
        for f in &report.flagged_nodes {
            assert!(report.node_scores.contains_key(f));
        }
        // Descending scores.
        for pair in report.ranked_paths.windows(2) {
            assert!(pair[0].score >= pair[1].score);
        }
        // All reported paths carry the graph's window index.
        for r in &report.ranked_paths {
            assert_eq!(r.path.window_index, 5);
        }
    }

    #[test]
    fn equal_scores_rank_shorter_path_first() {
        // Force a tie by scoring against a zero centroid with zero-width
        // deviations impossible; instead pin every node score to the same
        // value through the report's own pipeline: identical feature rows
        // give identical embeddings, hence identical scores.
        let cfg = small_cfg();
        let params = ModelParams::init(&cfg).unwrap();
        let services = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let x = Tensor2::from_fn(3, NODE_FEATURE_DIM, |_, c| 0.1 * c as f64);
        let graph =
            ServiceGraph::new(0, services, x, Tensor2::zeros(3, 3), Map::new()).unwrap();
        let centroid = Centroid { mu: vec![0.2; cfg.embedding_dim()], frozen: true };
        let trees = vec![
            tree(vec![
                span("t1", "r", None, "a", 0),
                span("t1", "c", Some("r"), "c", 1),
            ]),
            tree(vec![span("t2", "r", None, "b", 0)]),
        ];
        let report =
            trace_root_cause(&graph, &trees, &params, &cfg, &centroid, 0.0, 10).unwrap();
        let scores: Vec<f64> = report.node_scores.values().cloned().collect();
        assert!(scores.windows(2).all(|w| w[0] == w[1]), "scores differ: {:?}", scores);
        assert_eq!(report.ranked_paths.len(), 2);
        assert_eq!(report.ranked_paths[0].score, report.ranked_paths[1].score);
        assert_eq!(report.ranked_paths[0].path.services, vec!["b".to_string()]);
    }

    #[test]
    fn ranked_paths_match_exhaustive_enumeration() {
        let cfg = small_cfg();
        let params = ModelParams::init(&cfg).unwrap();
        let svc_names = ["s0", "s1", "s2", "s3", "s4"];
        let mut rng = ChaCha8Rng::seed_from_u64(42);

        // Random forest over five services, far fewer than 50 distinct paths.
        let mut trees = Vec::new();
        for t in 0..8 {
            let mut spans = vec![span(&format!("t{}", t), "root", None, svc_names[rng.gen_range(0..5)], 0)];
            let n_children = rng.gen_range(1..4usize);
            for c in 0..n_children {
                let id = format!("c{}", c);
                spans.push(span(
                    &format!("t{}", t),
                    &id,
                    Some("root"),
                    svc_names[rng.gen_range(0..5)],
                    c as i64 + 1,
                ));
                if rng.gen_bool(0.5) {
                    spans.push(span(
                        &format!("t{}", t),
                        &format!("g{}", c),
                        Some(&id),
                        svc_names[rng.gen_range(0..5)],
                        c as i64 + 10,
                    ));
                }
            }
            trees.push(tree(spans));
        }
        let graph = graph_covering(&svc_names, &cfg);
        let centroid = Centroid { mu: vec![0.05; cfg.embedding_dim()], frozen: true };
        let report =
            trace_root_cause(&graph, &trees, &params, &cfg, &centroid, 0.0, usize::MAX).unwrap();

        // Oracle: walk every tree by hand, enumerate root-to-leaf service
        // sequences, dedupe, score with scalar arithmetic, sort.
        let scores = score_window(&graph, &params, &cfg, &centroid).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        let mut expect: Vec<(Vec<String>, f64)> = Vec::new();
        for t in &trees {
            let mut stack = vec![(t.root().span_id.clone(), vec![t.root().service_name.clone()])];
            while let Some((id, path)) = stack.pop() {
                let kids = t.children_of(&id);
                if kids.is_empty() {
                    if seen.insert(path.clone()) {
                        let s: f64 = path.iter().map(|p| scores[p]).sum::<f64>() / path.len() as f64;
                        expect.push((path.clone(), s));
                    }
                    continue;
                }
                for k in kids {
                    let mut next = path.clone();
                    next.push(t.span(k).unwrap().service_name.clone());
                    stack.push((k.clone(), next));
                }
            }
        }
        expect.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then(a.0.len().cmp(&b.0.len()))
                .then(a.0.cmp(&b.0))
        });

        assert_eq!(report.ranked_paths.len(), expect.len());
        for (got, (want_seq, want_score)) in report.ranked_paths.iter().zip(&expect) {
            assert_eq!(&got.path.services, want_seq);
            assert!((got.score - want_score).abs() <= 1e-12);
        }
    }

    #[test]
    fn no_trees_and_zero_top_k_degenerate_cleanly() {
        let cfg = small_cfg();
        let params = ModelParams::init(&cfg).unwrap();
        let graph = graph_covering(&["a", "b"], &cfg);
        let centroid = Centroid { mu: vec![0.0; cfg.embedding_dim()], frozen: true };
        let report = trace_root_cause(&graph, &[], &params, &cfg, &centroid, 0.5, 10).unwrap();
        assert!(report.ranked_paths.is_empty());
        assert_eq!(report.node_scores.len(), 2);

        let trees = vec![tree(vec![span("t", "r", None, "a", 0)])];
        let report = trace_root_cause(&graph, &trees, &params, &cfg, &centroid, 0.5, 0).unwrap();
        assert!(report.ranked_paths.is_empty());
    }

    #[test]
    fn score_equal_to_threshold_is_not_flagged() {
        let cfg = small_cfg();
        let params = ModelParams::init(&cfg).unwrap();
        let graph = graph_covering(&["a", "b"], &cfg);
        let centroid = Centroid { mu: vec![0.0; cfg.embedding_dim()], frozen: true };
        let scores = score_window(&graph, &params, &cfg, &centroid).unwrap();
        let max = scores.values().cloned().fold(f64::NEG_INFINITY, f64::max);
        let report = trace_root_cause(&graph, &[], &params, &cfg, &centroid, max, 5).unwrap();
        assert!(!report.flagged_nodes.iter().any(|f| scores[f] == max));
        let strictly_above: Vec<&String> =
            scores.iter().filter(|(_, &s)| s > max).map(|(k, _)| k).collect();
        assert_eq!(report.flagged_nodes.len(), strictly_above.len());
    }

    #[test]
    fn scoring_windows_in_parallel_matches_serial() {
        let cfg = small_cfg();
        let params = ModelParams::init(&cfg).unwrap();
        let graphs: Vec<ServiceGraph> =
            (0..4).map(|w| random_graph(&cfg, 4, w, 50 + w as u64)).collect();
        let centroid = Centroid { mu: vec![0.1; cfg.embedding_dim()], frozen: true };
        let par = score_windows(&graphs, &params, &cfg, &centroid).unwrap();
        let ser: Vec<_> = graphs
            .iter()
            .map(|g| score_window(g, &params, &cfg, &centroid).unwrap())
            .collect();
        assert_eq!(par, ser);
    }
}
