//! Subcommand bodies. Every command reads and writes fixed-name artifacts
//! under one output directory so runs compose in scripts:
//!
//! ```text
//! synth ──> spans.ndjson, labels.csv, events.csv
//! ingest ──> rejects.ndjson
//! build-graphs ──> graphs.json
//! train ──> model.json, training_trace.csv
//! score ──> scores.csv
//! trace ──> report.json
//! eval auc ──> metrics.json        eval sweep-* ──> sweep.csv, sweep.json
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use chaintrace::detector::{
    score_windows, select_threshold, train, TrainedDetector,
    write_training_trace,
};
use chaintrace::eval::{
    auc, classification_metrics, run_scaling_sweep, run_weight_decay_sweep, write_scores_csv,
    write_sweep_csv, LabeledScore, Metrics, SweepResult, SCALING_GRID, WEIGHT_DECAY_GRID,
};
use chaintrace::graph::{
    aggregate_window, attach_histories, compute_feature_stats, partition_into_windows,
    standardize_features, FeatureStats, ServiceGraph, WindowConfig,
};
use chaintrace::span::{
    build_trace_tree, group_by_trace, parse_spans, write_ndjson, TraceTree,
};
use chaintrace::synth::{
    apply_scaling, generate_topology, generate_traces, inject_anomaly, read_labels_csv,
    write_events_csv, write_labels_csv,
};
use chaintrace::{jsonfmt, Error, Result};

use crate::config::RunConfig;

pub const SPANS_FILE: &str = "spans.ndjson";
pub const REJECTS_FILE: &str = "rejects.ndjson";
pub const LABELS_FILE: &str = "labels.csv";
pub const EVENTS_FILE: &str = "events.csv";
pub const GRAPHS_FILE: &str = "graphs.json";
pub const MODEL_FILE: &str = "model.json";
pub const TRAINING_TRACE_FILE: &str = "training_trace.csv";
pub const SCORES_FILE: &str = "scores.csv";
pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const SWEEP_CSV_FILE: &str = "sweep.csv";
pub const SWEEP_JSON_FILE: &str = "sweep.json";

/// On-disk form of the standardized window graphs plus everything needed to
/// score consistently later: the window config, the split, and the training
/// feature statistics.
#[derive(Serialize, Deserialize)]
pub struct GraphsDoc {
    pub window: WindowConfig,
    pub train_windows: usize,
    pub val_windows: usize,
    pub stats: FeatureStats,
    pub graphs: Vec<ServiceGraph>,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let file = File::open(path)
        .map_err(|e| Error::Config(format!("cannot open {}: {}", path.display(), e)))?;
    Ok(BufReader::new(file))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path)
        .map_err(|e| Error::Config(format!("cannot create {}: {}", path.display(), e)))?;
    Ok(BufWriter::new(file))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    jsonfmt::to_writer(&mut out, value)?;
    out.write_all(b"\n").map_err(Error::Io)?;
    out.flush().map_err(Error::Io)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_reader(open(path)?).map_err(Error::Json)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Config(format!("cannot create {}: {}", dir.display(), e)))
}

/// Generate a synthetic corpus: topology, traces, injected anomalies when
/// any affected windows are configured, scaling events when the frequency
/// is positive.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let wl = cfg.window.window_length_us;
    cfg.window.validate()?;
    let topology = generate_topology(&cfg.topology)?;
    let mut spans = generate_traces(
        &topology,
        cfg.synth.traces_per_window,
        cfg.synth.n_windows,
        wl,
        cfg.synth.seed,
    )?;

    let mut labels = Vec::new();
    if !cfg.anomaly.affected_windows.is_empty() {
        let (mutated, l) = inject_anomaly(&spans, &topology, &cfg.anomaly, wl)?;
        spans = mutated;
        labels = l;
    }
    let mut events = Vec::new();
    if cfg.scaling.frequency_per_hour > 0.0 {
        let (scaled, e) = apply_scaling(&spans, &topology, &cfg.scaling, wl)?;
        spans = scaled;
        events = e;
    }

    write_ndjson(create(&out.join(SPANS_FILE))?, &spans)?;
    write_labels_csv(create(&out.join(LABELS_FILE))?, &labels)?;
    write_events_csv(create(&out.join(EVENTS_FILE))?, &events)?;
    let traces = spans.iter().filter(|s| s.parent_span_id.is_none()).count();
    println!(
        "synth: {} spans in {} traces over {} windows ({} services); {} labels, {} scaling events -> {}",
        spans.len(),
        traces,
        cfg.synth.n_windows,
        topology.services.len(),
        labels.len(),
        events.len(),
        out.display()
    );
    Ok(())
}

/// Parse an NDJSON span file, writing rejected lines and reporting how many
/// traces assemble into valid trees.
pub fn cmd_ingest(out: &Path, input: Option<&Path>) -> Result<()> {
    ensure_dir(out)?;
    let source = input.map(PathBuf::from).unwrap_or_else(|| out.join(SPANS_FILE));
    let (spans, rejects) = parse_spans(open(&source)?)?;
    write_ndjson(create(&out.join(REJECTS_FILE))?, &rejects)?;

    let mut traces = 0usize;
    let mut malformed = 0usize;
    for group in group_by_trace(spans.clone()).values() {
        match build_trace_tree(group) {
            Ok(_) => traces += 1,
            Err(_) => malformed += 1,
        }
    }
    println!(
        "ingest: {} spans accepted, {} lines rejected; {} traces ({} malformed) from {}",
        spans.len(),
        rejects.len(),
        traces,
        malformed,
        source.display()
    );
    Ok(())
}

fn load_trees(path: &Path) -> Result<Vec<TraceTree>> {
    let (spans, rejects) = parse_spans(open(path)?)?;
    if !rejects.is_empty() {
        return Err(Error::Config(format!(
            "{}: {} unparseable lines (run ingest for details)",
            path.display(),
            rejects.len()
        )));
    }
    group_by_trace(spans)
        .into_values()
        .map(|group| build_trace_tree(&group))
        .collect()
}

/// Aggregate spans into per-window service graphs, standardize features
/// with statistics from the training prefix, and attach edge histories.
pub fn cmd_build_graphs(cfg: &RunConfig, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    cfg.window.validate()?;
    let trees = load_trees(&out.join(SPANS_FILE))?;
    let partitions = partition_into_windows(&trees, &cfg.window);
    let (lo, hi) = match (partitions.keys().next(), partitions.keys().next_back()) {
        (Some(&lo), Some(&hi)) => (lo, hi),
        _ => return Err(Error::Config("no traces to aggregate".into())),
    };
    let mut graphs = Vec::with_capacity((hi - lo + 1) as usize);
    for w in lo..=hi {
        let in_window: Vec<&TraceTree> = partitions.get(&w).map(|v| v.to_vec()).unwrap_or_default();
        graphs.push(aggregate_window(&in_window, w, &cfg.window)?);
    }
    if cfg.split.train_windows == 0 || cfg.split.train_windows > graphs.len() {
        return Err(Error::Config(format!(
            "split.train_windows = {} but the corpus has {} windows",
            cfg.split.train_windows,
            graphs.len()
        )));
    }
    let stats = compute_feature_stats(&graphs[..cfg.split.train_windows])?;
    let (standardized, _) = standardize_features(&graphs, Some(&stats))?;
    let graphs = attach_histories(&standardized, cfg.window.history_len)?;

    let doc = GraphsDoc {
        window: cfg.window.clone(),
        train_windows: cfg.split.train_windows,
        val_windows: cfg.split.val_windows,
        stats,
        graphs,
    };
    write_json(&out.join(GRAPHS_FILE), &doc)?;
    println!(
        "build-graphs: {} windows [{}..{}], stats from the first {} -> {}",
        doc.graphs.len(),
        lo,
        hi,
        doc.train_windows,
        out.join(GRAPHS_FILE).display()
    );
    Ok(())
}

/// Train the detector on the training prefix and pick the threshold from
/// validation-window scores (training scores when the split has no
/// validation windows).
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let doc: GraphsDoc = read_json(&out.join(GRAPHS_FILE))?;
    if doc.train_windows > doc.graphs.len() {
        return Err(Error::Config(format!(
            "graphs.json declares {} training windows but holds {}",
            doc.train_windows,
            doc.graphs.len()
        )));
    }
    let model_cfg = chaintrace::model::ModelConfig {
        // Histories were attached at build time; their length wins.
        history_len: doc.window.history_len,
        ..cfg.model.clone()
    };
    let outcome = train(&doc.graphs[..doc.train_windows], &model_cfg, &cfg.train)?;

    let val_end = (doc.train_windows + doc.val_windows).min(doc.graphs.len());
    let threshold_slice = if doc.val_windows > 0 && val_end > doc.train_windows {
        &doc.graphs[doc.train_windows..val_end]
    } else {
        &doc.graphs[..doc.train_windows]
    };
    let scores: Vec<f64> = score_windows(threshold_slice, &outcome.params, &model_cfg, &outcome.centroid)?
        .into_iter()
        .flat_map(|m| m.into_values())
        .collect();
    let threshold = select_threshold(&scores, cfg.score.quantile)?;

    let detector = TrainedDetector {
        config: model_cfg,
        params: outcome.params,
        centroid: outcome.centroid,
        threshold,
    };
    write_json(&out.join(MODEL_FILE), &detector.to_doc())?;
    write_training_trace(create(&out.join(TRAINING_TRACE_FILE))?, &outcome.trace)?;
    let last = outcome.trace.last().expect("training trace is never empty");
    println!(
        "train: {} epochs on {} windows, final loss {:.6e}; threshold {:.6e} (q{} over {} scores) -> {}",
        cfg.train.epochs,
        doc.train_windows,
        last.loss,
        threshold,
        cfg.score.quantile,
        scores.len(),
        out.join(MODEL_FILE).display()
    );
    Ok(())
}

/// Score every window with a trained model and write labeled rows, joining
/// ground-truth labels when labels.csv is present.
pub fn cmd_score(out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let doc: GraphsDoc = read_json(&out.join(GRAPHS_FILE))?;
    let detector = TrainedDetector::from_doc(&read_json(&out.join(MODEL_FILE))?)?;
    let per_window = score_windows(
        &doc.graphs,
        &detector.params,
        &detector.config,
        &detector.centroid,
    )?;

    let labels_path = out.join(LABELS_FILE);
    let label_set: std::collections::BTreeSet<(i64, String)> = if labels_path.exists() {
        read_labels_csv(open(&labels_path)?)?
            .into_iter()
            .map(|l| (l.window_index, l.service_name))
            .collect()
    } else {
        Default::default()
    };

    let mut rows = Vec::new();
    let mut flagged = 0usize;
    for (graph, scores) in doc.graphs.iter().zip(per_window) {
        for (service, score) in scores {
            if score > detector.threshold {
                flagged += 1;
            }
            let anomalous = label_set.contains(&(graph.window_index(), service.clone()));
            rows.push(LabeledScore {
                window_index: graph.window_index(),
                service,
                score,
                anomalous,
            });
        }
    }
    write_scores_csv(create(&out.join(SCORES_FILE))?, &rows)?;
    println!(
        "score: {} rows over {} windows, {} above threshold {:.6e} -> {}",
        rows.len(),
        doc.graphs.len(),
        flagged,
        detector.threshold,
        out.join(SCORES_FILE).display()
    );
    Ok(())
}

/// Rank candidate root-cause paths for one window (the last one by default).
pub fn cmd_trace(cfg: &RunConfig, out: &Path, window: Option<i64>, top_k: Option<usize>) -> Result<()> {
    ensure_dir(out)?;
    let doc: GraphsDoc = read_json(&out.join(GRAPHS_FILE))?;
    let detector = TrainedDetector::from_doc(&read_json(&out.join(MODEL_FILE))?)?;
    let graph = match window {
        Some(w) => doc
            .graphs
            .iter()
            .find(|g| g.window_index() == w)
            .ok_or(Error::WindowOutOfRange {
                window: w,
                max: doc.graphs.last().map(|g| g.window_index()).unwrap_or(0),
            })?,
        None => doc
            .graphs
            .last()
            .ok_or_else(|| Error::Config("graphs.json holds no windows".into()))?,
    };

    let trees = load_trees(&out.join(SPANS_FILE))?;
    let in_window: Vec<TraceTree> = {
        let partitions = partition_into_windows(&trees, &doc.window);
        let ids: std::collections::BTreeSet<&str> = partitions
            .get(&graph.window_index())
            .map(|v| v.iter().map(|t| t.trace_id()).collect())
            .unwrap_or_default();
        trees.iter().filter(|t| ids.contains(t.trace_id())).cloned().collect()
    };

    let report = chaintrace::detector::trace_root_cause(
        graph,
        &in_window,
        &detector.params,
        &detector.config,
        &detector.centroid,
        detector.threshold,
        top_k.unwrap_or(cfg.score.top_k),
    )?;
    write_json(&out.join(REPORT_FILE), &report)?;
    println!(
        "trace: window {}, {} flagged of {} services, {} ranked paths -> {}",
        report.window_index,
        report.flagged_nodes.len(),
        report.node_scores.len(),
        report.ranked_paths.len(),
        out.join(REPORT_FILE).display()
    );
    for (i, ranked) in report.ranked_paths.iter().enumerate() {
        println!(
            "  {}. {:.6e}  {}",
            i + 1,
            ranked.score,
            ranked.path.services.join(" -> ")
        );
    }
    Ok(())
}

/// Metrics file written by `eval auc`.
#[derive(Serialize, Deserialize)]
pub struct MetricsDoc {
    pub auc: f64,
    pub threshold: f64,
    pub metrics: Metrics,
}

/// AUC plus confusion metrics over scores.csv. The threshold comes from the
/// flag when given, else from model.json.
pub fn cmd_eval_auc(out: &Path, threshold: Option<f64>) -> Result<()> {
    ensure_dir(out)?;
    let rows = chaintrace::eval::read_scores_csv(open(&out.join(SCORES_FILE))?)?;
    let threshold = match threshold {
        Some(t) => t,
        None => TrainedDetector::from_doc(&read_json(&out.join(MODEL_FILE))?)?.threshold,
    };
    let doc = MetricsDoc {
        auc: auc(&rows)?,
        threshold,
        metrics: classification_metrics(&rows, threshold),
    };
    write_json(&out.join(METRICS_FILE), &doc)?;
    println!(
        "eval auc: auc {:.4} acc {:.4} recall {:.4} f1 {:.4} over {} rows -> {}",
        doc.auc,
        doc.metrics.accuracy,
        doc.metrics.recall,
        doc.metrics.f1,
        rows.len(),
        out.join(METRICS_FILE).display()
    );
    Ok(())
}

pub enum SweepKind {
    WeightDecay,
    Scaling,
}

/// Run a sensitivity sweep over the benchmark protocol and write both the
/// per-run CSV and the full result document.
pub fn cmd_sweep(
    cfg: &RunConfig,
    out: &Path,
    kind: SweepKind,
    grid: &[f64],
    seeds: &[u64],
) -> Result<()> {
    ensure_dir(out)?;
    let spec = cfg.benchmark_spec();
    let default_grid: &[f64] = match kind {
        SweepKind::WeightDecay => &WEIGHT_DECAY_GRID,
        SweepKind::Scaling => &SCALING_GRID,
    };
    let grid = if grid.is_empty() { default_grid } else { grid };
    let seeds: Vec<u64> = if seeds.is_empty() { vec![0, 1, 2] } else { seeds.to_vec() };
    let result: SweepResult = match kind {
        SweepKind::WeightDecay => run_weight_decay_sweep(&spec, grid, &seeds)?,
        SweepKind::Scaling => run_scaling_sweep(&spec, grid, &seeds)?,
    };
    write_sweep_csv(create(&out.join(SWEEP_CSV_FILE))?, &result)?;
    write_json(&out.join(SWEEP_JSON_FILE), &result)?;
    println!(
        "eval sweep: {} over {} values x {} seeds -> {}",
        result.parameter,
        result.grid.len(),
        result.seeds.len(),
        out.join(SWEEP_CSV_FILE).display()
    );
    for summary in &result.summary {
        println!(
            "  {} = {:.6e}: mean f1 {:.4} (std {:.4}), mean auc {:.4}",
            result.parameter, summary.param_value, summary.mean_f1, summary.std_f1, summary.mean_auc
        );
    }
    Ok(())
}
