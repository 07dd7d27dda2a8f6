//! Detection metrics and the synthetic benchmark harness.
//!
//! Metrics work on labeled per-node-per-window scores. The harness builds a
//! seeded corpus end to end — topology, traces, injected latency spikes,
//! optional scaling disturbances — trains the detector on the clean leading
//! windows, picks the threshold on validation windows, and evaluates on the
//! held-out tail. The two sweeps vary weight decay and scaling frequency
//! over that protocol, fanning seeds out in parallel.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{
    score_window, select_threshold, train, TraceRow, TrainConfig,
};
use crate::error::Error;
use crate::graph::{
    aggregate_window, attach_histories, compute_feature_stats, partition_into_windows,
    standardize_features, window_of, ServiceGraph, WindowConfig,
};
use crate::jsonfmt::fmt_f64;
use crate::model::ModelConfig;
use crate::span::{build_trace_tree, group_by_trace, SpanRecord, TraceTree};
use crate::synth::{
    apply_scaling, generate_topology, generate_traces, inject_anomaly, AnomalyKind, AnomalySpec,
    LabelRecord, ScalingSpec, TopologySpec,
};
use crate::Result;

/// Default weight-decay grid for the sensitivity sweep.
pub const WEIGHT_DECAY_GRID: [f64; 6] = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1];

/// Default scaling-frequency grid (events per simulated hour).
pub const SCALING_GRID: [f64; 4] = [0.0, 2.0, 8.0, 32.0];

/// Derive a decorrelated sub-seed for one stage of a pipeline
/// (SplitMix64-style finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// --- labeled scores --------------------------------------------------------

/// One scored node in one window, with its ground-truth label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledScore {
    pub window_index: i64,
    pub service: String,
    pub score: f64,
    pub anomalous: bool,
}

/// CSV form: `window_index,service,score,label` with label `anomalous` or
/// `normal` and 17-significant-digit scores.
pub fn write_scores_csv<W: Write>(w: W, rows: &[LabeledScore]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["window_index", "service", "score", "label"])?;
    for r in rows {
        wtr.write_record([
            r.window_index.to_string(),
            r.service.clone(),
            fmt_f64(r.score),
            if r.anomalous { "anomalous" } else { "normal" }.to_string(),
        ])?;
    }
    wtr.flush().map_err(Error::Io)?;
    Ok(())
}

pub fn read_scores_csv<R: Read>(r: R) -> Result<Vec<LabeledScore>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2; // header occupies line 1
        let fail = |reason: &str| Error::InvalidScoreRecord {
            line,
            reason: reason.to_string(),
        };
        let window_index = rec
            .get(0)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| fail("window_index must be an integer"))?;
        let service = rec.get(1).ok_or_else(|| fail("missing service"))?.to_string();
        let score: f64 = rec
            .get(2)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| fail("score must be a float"))?;
        if !score.is_finite() {
            return Err(fail("score must be finite"));
        }
        let anomalous = match rec.get(3) {
            Some("anomalous") => true,
            Some("normal") => false,
            _ => return Err(fail("label must be 'anomalous' or 'normal'")),
        };
        out.push(LabeledScore {
            window_index,
            service,
            score,
            anomalous,
        });
    }
    Ok(out)
}

// --- metrics ---------------------------------------------------------------

/// Area under the ROC curve: the probability that a random anomalous score
/// exceeds a random normal one, ties counting one half. Computed from
/// average ranks (Mann-Whitney), which equals the all-pairs count exactly.
pub fn auc(rows: &[LabeledScore]) -> Result<f64> {
    let n_pos = rows.iter().filter(|r| r.anomalous).count();
    let n_neg = rows.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClassScores);
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[a].score.total_cmp(&rows[b].score));

    // Average rank over each tie group; ranks are 1-based.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && rows[order[j]].score == rows[order[i]].score {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1 ..= j
        for &idx in &order[i..j] {
            if rows[idx].anomalous {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Threshold-based confusion metrics. Scores strictly above the threshold
/// predict anomalous. Undefined ratios (empty denominators) are 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub true_negatives: usize,
}

pub fn classification_metrics(rows: &[LabeledScore], threshold: f64) -> Metrics {
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for r in rows {
        match (r.score > threshold, r.anomalous) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Metrics {
        accuracy: ratio(tp + tn, rows.len()),
        precision,
        recall,
        f1,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        true_negatives: tn,
    }
}

// --- benchmark harness -----------------------------------------------------

/// Full description of one synthetic detection experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSpec {
    pub topology: TopologySpec,
    pub traces_per_window: usize,
    pub n_windows: usize,
    /// Leading windows used for training; must be anomaly-free.
    pub train_windows: usize,
    /// Windows after training used to pick the threshold.
    pub val_windows: usize,
    pub window: WindowConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Fraction of test (window, service) cells hit by an anomaly.
    pub anomaly_fraction: f64,
    /// Latency multiplier of the injected spikes.
    pub anomaly_magnitude: f64,
    /// Score quantile of the validation windows used as threshold.
    pub quantile: f64,
    /// Latency multiplier of scaling disturbances (scaling sweep only).
    pub scaling_jitter: f64,
    /// Windows each scaling event disturbs.
    pub scaling_duration_windows: usize,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            topology: TopologySpec::default(),
            traces_per_window: 200,
            n_windows: 60,
            train_windows: 40,
            val_windows: 5,
            window: WindowConfig::default(),
            model: ModelConfig::default(),
            // Longer, hotter training than the library default: enough
            // optimizer steps that the weight-decay grid's upper end visibly
            // shrinks the network within the sweep budget.
            train: TrainConfig {
                epochs: 300,
                learning_rate: 0.01,
                ..TrainConfig::default()
            },
            anomaly_fraction: 0.10,
            anomaly_magnitude: 8.0,
            quantile: 0.99,
            scaling_jitter: 3.0,
            scaling_duration_windows: 2,
        }
    }
}

impl BenchmarkSpec {
    pub fn test_windows(&self) -> usize {
        self.n_windows - self.train_windows - self.val_windows
    }

    pub fn validate(&self) -> Result<()> {
        self.topology.validate()?;
        self.window.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.train_windows == 0 || self.val_windows == 0 {
            return Err(Error::Config(
                "train_windows and val_windows must be at least 1".into(),
            ));
        }
        if self.train_windows + self.val_windows >= self.n_windows {
            return Err(Error::Config(format!(
                "{} train + {} validation windows leave no test windows out of {}",
                self.train_windows, self.val_windows, self.n_windows
            )));
        }
        if !(0.0..=1.0).contains(&self.anomaly_fraction) {
            return Err(Error::Config(format!(
                "anomaly_fraction must be in [0, 1], got {}",
                self.anomaly_fraction
            )));
        }
        if !(self.anomaly_magnitude >= 1.0) {
            return Err(Error::Config(format!(
                "anomaly_magnitude must be at least 1, got {}",
                self.anomaly_magnitude
            )));
        }
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return Err(Error::InvalidQuantile { q: self.quantile });
        }
        if self.traces_per_window == 0 {
            return Err(Error::Config("traces_per_window must be at least 1".into()));
        }
        Ok(())
    }
}

/// Outcome of one benchmark run.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRun {
    pub auc: f64,
    pub metrics: Metrics,
    pub threshold: f64,
    /// Labeled test scores, one row per (window, service).
    pub scores: Vec<LabeledScore>,
    /// Ground-truth labels of the injected anomalies.
    pub labels: Vec<LabelRecord>,
    pub training: Vec<TraceRow>,
}

/// Run the benchmark once: corpus → inject → (scale) → graphs → train →
/// threshold on validation → metrics on test.
///
/// Every stage derives its own sub-seed from `seed`, and neither
/// `weight_decay` nor `scaling_freq` feeds the corpus seeds, so runs with
/// different sweep parameters see identical workloads.
pub fn run_benchmark(
    spec: &BenchmarkSpec,
    weight_decay: f64,
    scaling_freq: f64,
    seed: u64,
) -> Result<BenchmarkRun> {
    spec.validate()?;
    let wl = spec.window.window_length_us;
    let topology = generate_topology(&TopologySpec {
        seed: derive_seed(seed, 0),
        ..spec.topology.clone()
    })?;
    let mut spans = generate_traces(
        &topology,
        spec.traces_per_window,
        spec.n_windows,
        wl,
        derive_seed(seed, 1),
    )?;

    // Choose anomalous (window, service) cells uniformly from the test
    // grid, then inject one latency spike per service covering its windows.
    let test_start = (spec.train_windows + spec.val_windows) as i64;
    let mut cells: Vec<(i64, usize)> = (test_start..spec.n_windows as i64)
        .flat_map(|w| (0..topology.services.len()).map(move |s| (w, s)))
        .collect();
    let n_anomalous = (cells.len() as f64 * spec.anomaly_fraction).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    for i in 0..n_anomalous {
        let j = rng.gen_range(i..cells.len());
        cells.swap(i, j);
    }
    let mut per_service: BTreeMap<usize, BTreeSet<i64>> = BTreeMap::new();
    for &(w, s) in &cells[..n_anomalous] {
        per_service.entry(s).or_default().insert(w);
    }
    let mut labels: Vec<LabelRecord> = Vec::new();
    for (svc, windows) in per_service {
        let anomaly = AnomalySpec {
            kind: AnomalyKind::LatencySpike,
            target: topology.services[svc].clone(),
            magnitude: spec.anomaly_magnitude,
            cascade_depth: 0,
            affected_windows: windows,
            seed: 0,
        };
        let (mutated, mut l) = inject_anomaly(&spans, &topology, &anomaly, wl)?;
        spans = mutated;
        labels.append(&mut l);
    }
    labels.sort();

    // Scaling disturbances hit only the held-out windows: training and
    // validation stay clean, mirroring disturbances at detection time.
    if scaling_freq > 0.0 {
        let roots: BTreeMap<&str, i64> = spans
            .iter()
            .filter(|s| s.parent_span_id.is_none())
            .map(|s| (s.trace_id.as_str(), window_of(s.start_ts, wl)))
            .collect();
        let (test_spans, rest): (Vec<SpanRecord>, Vec<SpanRecord>) = spans
            .iter()
            .cloned()
            .partition(|s| roots.get(s.trace_id.as_str()).is_some_and(|&w| w >= test_start));
        let scaling = ScalingSpec {
            frequency_per_hour: scaling_freq,
            jitter_magnitude: spec.scaling_jitter,
            affected_duration_windows: spec.scaling_duration_windows,
            seed: derive_seed(seed, 3),
        };
        let (scaled, _events) = apply_scaling(&test_spans, &topology, &scaling, wl)?;
        spans = rest;
        spans.extend(scaled);
    }

    let graphs = build_benchmark_graphs(&spans, spec)?;
    let model_cfg = ModelConfig {
        seed: derive_seed(seed, 4),
        history_len: spec.window.history_len,
        ..spec.model.clone()
    };
    let train_cfg = TrainConfig {
        weight_decay,
        ..spec.train.clone()
    };
    let outcome = train(&graphs[..spec.train_windows], &model_cfg, &train_cfg)?;

    let mut val_scores = Vec::new();
    for g in &graphs[spec.train_windows..spec.train_windows + spec.val_windows] {
        val_scores.extend(score_window(g, &outcome.params, &model_cfg, &outcome.centroid)?.into_values());
    }
    let threshold = select_threshold(&val_scores, spec.quantile)?;

    let label_set: BTreeSet<(i64, &str)> = labels
        .iter()
        .map(|l| (l.window_index, l.service_name.as_str()))
        .collect();
    let mut scores = Vec::new();
    for g in &graphs[test_start as usize..] {
        let window_scores = score_window(g, &outcome.params, &model_cfg, &outcome.centroid)?;
        for (service, score) in window_scores {
            let anomalous = label_set.contains(&(g.window_index(), service.as_str()));
            scores.push(LabeledScore {
                window_index: g.window_index(),
                service,
                score,
                anomalous,
            });
        }
    }
    let auc_value = auc(&scores)?;
    let metrics = classification_metrics(&scores, threshold);
    Ok(BenchmarkRun {
        auc: auc_value,
        metrics,
        threshold,
        scores,
        labels,
        training: outcome.trace,
    })
}

/// Spans → trees → per-window graphs → standardization (training stats) →
/// edge histories.
fn build_benchmark_graphs(spans: &[SpanRecord], spec: &BenchmarkSpec) -> Result<Vec<ServiceGraph>> {
    let trees: Vec<TraceTree> = group_by_trace(spans.to_vec())
        .into_values()
        .map(|s| build_trace_tree(&s))
        .collect::<Result<_>>()?;
    let partitions = partition_into_windows(&trees, &spec.window);
    let mut graphs = Vec::with_capacity(spec.n_windows);
    for w in 0..spec.n_windows as i64 {
        let in_window: Vec<&TraceTree> = partitions.get(&w).map(|v| v.to_vec()).unwrap_or_default();
        graphs.push(aggregate_window(&in_window, w, &spec.window)?);
    }
    let stats = compute_feature_stats(&graphs[..spec.train_windows])?;
    let (standardized, _) = standardize_features(&graphs, Some(&stats))?;
    attach_histories(&standardized, spec.window.history_len)
}

// --- sweeps ----------------------------------------------------------------

/// One benchmark run inside a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub param_value: f64,
    pub seed: u64,
    pub auc: f64,
    pub accuracy: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Seed-aggregated statistics of one grid value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub param_value: f64,
    pub mean_auc: f64,
    pub mean_f1: f64,
    /// Population standard deviation of F1 over seeds.
    pub std_f1: f64,
}

/// Full sweep output: per-run points plus per-value summaries, both ordered
/// by ascending parameter value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub parameter: String,
    pub grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub points: Vec<SweepPoint>,
    pub summary: Vec<SweepSummary>,
}

fn run_sweep(
    spec: &BenchmarkSpec,
    parameter: &str,
    grid: &[f64],
    seeds: &[u64],
    run: impl Fn(f64, u64) -> Result<BenchmarkRun> + Sync,
) -> Result<SweepResult> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one grid value and one seed".into()));
    }
    spec.validate()?;
    let mut grid: Vec<f64> = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let jobs: Vec<(f64, u64)> = grid
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let points: Vec<SweepPoint> = jobs
        .par_iter()
        .map(|&(value, seed)| {
            let out = run(value, seed)?;
            Ok(SweepPoint {
                param_value: value,
                seed,
                auc: out.auc,
                accuracy: out.metrics.accuracy,
                recall: out.metrics.recall,
                f1: out.metrics.f1,
            })
        })
        .collect::<Result<_>>()?;

    let summary = grid
        .iter()
        .map(|&v| {
            let f1s: Vec<f64> = points
                .iter()
                .filter(|p| p.param_value == v)
                .map(|p| p.f1)
                .collect();
            let aucs: Vec<f64> = points
                .iter()
                .filter(|p| p.param_value == v)
                .map(|p| p.auc)
                .collect();
            let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
            let mf1 = mean(&f1s);
            let var = f1s.iter().map(|x| (x - mf1) * (x - mf1)).sum::<f64>() / f1s.len() as f64;
            SweepSummary {
                param_value: v,
                mean_auc: mean(&aucs),
                mean_f1: mf1,
                std_f1: var.sqrt(),
            }
        })
        .collect();

    Ok(SweepResult {
        parameter: parameter.to_string(),
        grid,
        seeds: seeds.to_vec(),
        points,
        summary,
    })
}

/// Sensitivity of detection quality to the weight-decay coefficient.
pub fn run_weight_decay_sweep(
    spec: &BenchmarkSpec,
    grid: &[f64],
    seeds: &[u64],
) -> Result<SweepResult> {
    run_sweep(spec, "weight_decay", grid, seeds, |value, seed| {
        run_benchmark(spec, value, 0.0, seed)
    })
}

/// Sensitivity of detection quality to the scaling-event frequency.
pub fn run_scaling_sweep(spec: &BenchmarkSpec, grid: &[f64], seeds: &[u64]) -> Result<SweepResult> {
    run_sweep(spec, "scaling_frequency", grid, seeds, |value, seed| {
        run_benchmark(spec, spec.train.weight_decay, value, seed)
    })
}

/// Sweep points as CSV: `param_value,seed,auc,acc,recall,f1`.
pub fn write_sweep_csv<W: Write>(w: W, result: &SweepResult) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["param_value", "seed", "auc", "acc", "recall", "f1"])?;
    for p in &result.points {
        wtr.write_record([
            fmt_f64(p.param_value),
            p.seed.to_string(),
            fmt_f64(p.auc),
            fmt_f64(p.accuracy),
            fmt_f64(p.recall),
            fmt_f64(p.f1),
        ])?;
    }
    wtr.flush().map_err(Error::Io)?;
    Ok(())
}
