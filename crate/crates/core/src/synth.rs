//! Synthetic microservice workloads: seeded topologies, trace corpora,
//! labeled anomaly injection, and instance-scaling disturbances.
//!
//! Everything is deterministic given its seed, down to the output bytes.
//! Generated spans always pass ingestion: every trace has a single root,
//! unique span ids, and valid tag values, and the mutation operators
//! (anomaly injection, scaling) preserve those guarantees — removals drop
//! whole subtrees and duplicates are appended as leaves.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::jsonfmt::fmt_f64;
use crate::span::SpanRecord;
use crate::Result;

/// Spread of span durations around their base latency, in log space.
const LATENCY_SIGMA: f64 = 0.25;

/// Stream separator for the secondary RNG used by effect draws, so that
/// event arrival times depend only on the seed and can be replayed
/// independently of how many effect samples each event consumes.
const EFFECTS_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;

// --- topology --------------------------------------------------------------

/// Knobs for random topology generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopologySpec {
    pub n_services: usize,
    /// Probability of each optional dependency edge beyond the spanning
    /// tree that keeps every service reachable.
    pub edge_density: f64,
    /// Maximum call-chain depth below the entry service.
    pub max_depth: usize,
    pub seed: u64,
}

impl Default for TopologySpec {
    fn default() -> Self {
        Self {
            n_services: 30,
            edge_density: 0.1,
            max_depth: 4,
            seed: 0,
        }
    }
}

impl TopologySpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_services == 0 {
            return Err(Error::Config("n_services must be at least 1".into()));
        }
        if !(self.edge_density > 0.0 && self.edge_density <= 1.0) {
            return Err(Error::Config(format!(
                "edge_density must be in (0, 1], got {}",
                self.edge_density
            )));
        }
        if self.max_depth == 0 {
            return Err(Error::Config("max_depth must be at least 1".into()));
        }
        Ok(())
    }
}

/// Call-behavior parameters of one dependency edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeParams {
    /// Median callee duration in microseconds.
    pub base_latency_us: f64,
    /// Probability that the caller takes this edge in a given trace.
    pub routing_prob: f64,
    pub error_prob: f64,
    pub retry_prob: f64,
    pub timeout_prob: f64,
}

/// A service dependency DAG with a single entry point.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    /// Service names; index order is the canonical node order.
    pub services: Vec<String>,
    /// Index of the entry service in `services`.
    pub entry: usize,
    /// Caller index → callee index; edges always point away from the entry.
    pub edges: BTreeMap<(usize, usize), EdgeParams>,
    /// Median duration of entry spans in microseconds.
    pub entry_base_latency_us: f64,
}

impl Topology {
    pub fn entry_service(&self) -> &str {
        &self.services[self.entry]
    }

    pub fn service_index(&self, name: &str) -> Option<usize> {
        self.services.iter().position(|s| s == name)
    }

    /// Outgoing edges of one service.
    pub fn edges_from(&self, caller: usize) -> impl Iterator<Item = (usize, &EdgeParams)> {
        self.edges
            .range((caller, 0)..(caller + 1, 0))
            .map(|(&(_, callee), p)| (callee, p))
    }
}

/// Generate a random DAG topology: the entry sits at depth 0, every other
/// service gets one parent at a strictly smaller depth (guaranteeing
/// reachability and acyclicity), and additional forward edges appear with
/// probability `edge_density`.
pub fn generate_topology(spec: &TopologySpec) -> Result<Topology> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_services;
    let services: Vec<String> = (0..n).map(|i| format!("svc{:03}", i)).collect();

    let mut depth = vec![0usize; n];
    for d in depth.iter_mut().skip(1) {
        *d = rng.gen_range(1..=spec.max_depth);
    }

    let edge_params = |rng: &mut ChaCha8Rng| EdgeParams {
        base_latency_us: rng.gen_range(2_000.0..40_000.0),
        routing_prob: rng.gen_range(0.5..1.0),
        error_prob: rng.gen_range(0.0..0.02),
        retry_prob: rng.gen_range(0.0..0.05),
        timeout_prob: rng.gen_range(0.0..0.01),
    };

    let mut edges = BTreeMap::new();
    for v in 1..n {
        let candidates: Vec<usize> = (0..n).filter(|&u| depth[u] < depth[v]).collect();
        let u = candidates[rng.gen_range(0..candidates.len())];
        let p = edge_params(&mut rng);
        edges.insert((u, v), p);
    }
    for u in 0..n {
        for v in 1..n {
            if depth[u] < depth[v] && !edges.contains_key(&(u, v)) && rng.gen::<f64>() < spec.edge_density
            {
                let p = edge_params(&mut rng);
                edges.insert((u, v), p);
            }
        }
    }

    Ok(Topology {
        services,
        entry: 0,
        edges,
        entry_base_latency_us: rng.gen_range(5_000.0..20_000.0),
    })
}

// --- trace generation ------------------------------------------------------

/// Generate `rate` traces per window for `n_windows` consecutive windows.
///
/// Each trace starts at the entry service and walks the topology: every
/// outgoing edge fires with its routing probability, spawning a child span
/// whose duration is log-normal around the edge's base latency. Root spans
/// start inside their window, so window assignment by root start is exact.
pub fn generate_traces(
    topology: &Topology,
    rate: usize,
    n_windows: usize,
    window_length_us: i64,
    seed: u64,
) -> Result<Vec<SpanRecord>> {
    if window_length_us <= 0 {
        return Err(Error::Config(format!(
            "window_length_us must be positive, got {}",
            window_length_us
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spans = Vec::new();
    for w in 0..n_windows {
        for k in 0..rate {
            let trace_id = format!("trace-{:05}-{:05}", w, k);
            let start = w as i64 * window_length_us + rng.gen_range(0..window_length_us);
            generate_one_trace(topology, &trace_id, start, &mut rng, &mut spans);
        }
    }
    Ok(spans)
}

fn sample_latency(base_us: f64, rng: &mut ChaCha8Rng) -> i64 {
    let dist = LogNormal::new(base_us.ln(), LATENCY_SIGMA).expect("finite positive base latency");
    (dist.sample(rng).round() as i64).max(1)
}

fn generate_one_trace(
    topology: &Topology,
    trace_id: &str,
    root_start: i64,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<SpanRecord>,
) {
    let mut counter = 0usize;
    let next_id = |counter: &mut usize| {
        let id = format!("s{}", counter);
        *counter += 1;
        id
    };
    let root_id = next_id(&mut counter);
    out.push(SpanRecord {
        trace_id: trace_id.to_string(),
        span_id: root_id.clone(),
        parent_span_id: None,
        service_name: topology.entry_service().to_string(),
        operation_name: "entry".into(),
        start_ts: root_start,
        duration: sample_latency(topology.entry_base_latency_us, rng),
        tags: BTreeMap::new(),
        logs: vec![],
    });

    // Walk depth-first; the DAG guarantees termination. Each visited edge
    // produces a fresh span even if the callee was reached before.
    let mut stack = vec![(topology.entry, root_id, root_start)];
    while let Some((caller, parent_id, parent_start)) = stack.pop() {
        for (callee, params) in topology.edges_from(caller) {
            if rng.gen::<f64>() >= params.routing_prob {
                continue;
            }
            let span_id = next_id(&mut counter);
            let start = parent_start + rng.gen_range(100..2_000);
            let mut tags = BTreeMap::new();
            if rng.gen::<f64>() < params.error_prob {
                tags.insert("error".to_string(), "true".to_string());
            }
            if rng.gen::<f64>() < params.retry_prob {
                tags.insert("retry_count".to_string(), rng.gen_range(1..4).to_string());
            }
            if rng.gen::<f64>() < params.timeout_prob {
                tags.insert("timeout".to_string(), "true".to_string());
            }
            out.push(SpanRecord {
                trace_id: trace_id.to_string(),
                span_id: span_id.clone(),
                parent_span_id: Some(parent_id.clone()),
                service_name: topology.services[callee].clone(),
                operation_name: "rpc".into(),
                start_ts: start,
                duration: sample_latency(params.base_latency_us, rng),
                tags,
                logs: vec![],
            });
            stack.push((callee, span_id, start));
        }
    }
}

// --- anomaly injection -----------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    LatencySpike,
    ErrorBurst,
    Cascade,
}

impl AnomalyKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AnomalyKind::LatencySpike => "latency_spike",
            AnomalyKind::ErrorBurst => "error_burst",
            AnomalyKind::Cascade => "cascade",
        }
    }
}

impl std::str::FromStr for AnomalyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latency_spike" => Ok(AnomalyKind::LatencySpike),
            "error_burst" => Ok(AnomalyKind::ErrorBurst),
            "cascade" => Ok(AnomalyKind::Cascade),
            other => Err(Error::Config(format!("unknown anomaly kind {:?}", other))),
        }
    }
}

/// One fault to inject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    pub target: String,
    /// Latency multiplier (spike/cascade, at least 1) or error probability
    /// (burst, in [0, 1]).
    pub magnitude: f64,
    /// Downstream hops affected by a cascade; the multiplier excess halves
    /// per hop.
    pub cascade_depth: usize,
    pub affected_windows: BTreeSet<i64>,
    /// Seed for the error-burst coin flips.
    pub seed: u64,
}

impl Default for AnomalySpec {
    fn default() -> Self {
        Self {
            kind: AnomalyKind::LatencySpike,
            target: "svc001".into(),
            magnitude: 8.0,
            cascade_depth: 2,
            affected_windows: BTreeSet::new(),
            seed: 0,
        }
    }
}

impl AnomalySpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            AnomalyKind::LatencySpike | AnomalyKind::Cascade => {
                self.magnitude >= 1.0 && self.magnitude.is_finite()
            }
            AnomalyKind::ErrorBurst => (0.0..=1.0).contains(&self.magnitude),
        };
        if !ok {
            return Err(Error::Config(format!(
                "magnitude {} out of range for {}",
                self.magnitude,
                self.kind.as_str()
            )));
        }
        Ok(())
    }
}

/// Ground-truth marker: this service misbehaved in this window.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabelRecord {
    pub window_index: i64,
    pub service_name: String,
    pub kind: AnomalyKind,
}

/// Map every span to its trace's window (assignment follows the root span);
/// also return the highest window seen.
fn trace_windows(spans: &[SpanRecord], window_length_us: i64) -> (BTreeMap<String, i64>, i64) {
    let mut windows = BTreeMap::new();
    let mut max_window = -1i64;
    for s in spans {
        if s.parent_span_id.is_none() {
            let w = s.start_ts.div_euclid(window_length_us);
            windows.insert(s.trace_id.clone(), w);
            max_window = max_window.max(w);
        }
    }
    (windows, max_window)
}

/// Per-service latency multipliers of one anomaly: the target gets the full
/// magnitude, cascades extend downstream with the excess halving per hop.
/// Breadth-first order keeps the strongest multiplier when a service is
/// reachable at several depths.
fn cascade_multipliers(
    topology: &Topology,
    target: usize,
    magnitude: f64,
    depth: usize,
) -> BTreeMap<usize, f64> {
    let mut mult = BTreeMap::new();
    let mut frontier = vec![target];
    mult.insert(target, magnitude);
    for hop in 1..=depth {
        let factor = 1.0 + (magnitude - 1.0) * 0.5_f64.powi(hop as i32);
        let mut next = Vec::new();
        for &u in &frontier {
            for (v, _) in topology.edges_from(u) {
                if let std::collections::btree_map::Entry::Vacant(e) = mult.entry(v) {
                    e.insert(factor);
                    next.push(v);
                }
            }
        }
        frontier = next;
    }
    mult
}

/// Inject one anomaly into a corpus, returning the mutated spans and the
/// ground-truth labels. A (window, service) pair is labeled only when at
/// least one of its spans was actually touched.
pub fn inject_anomaly(
    spans: &[SpanRecord],
    topology: &Topology,
    spec: &AnomalySpec,
    window_length_us: i64,
) -> Result<(Vec<SpanRecord>, Vec<LabelRecord>)> {
    spec.validate()?;
    let target = topology
        .service_index(&spec.target)
        .ok_or_else(|| Error::UnknownService {
            service: spec.target.clone(),
        })?;
    let (windows, max_window) = trace_windows(spans, window_length_us);
    for &w in &spec.affected_windows {
        if w < 0 || w > max_window {
            return Err(Error::WindowOutOfRange { window: w, max: max_window });
        }
    }

    let multipliers = match spec.kind {
        AnomalyKind::LatencySpike | AnomalyKind::ErrorBurst => {
            BTreeMap::from([(target, spec.magnitude)])
        }
        AnomalyKind::Cascade => {
            cascade_multipliers(topology, target, spec.magnitude, spec.cascade_depth)
        }
    };
    let by_name: BTreeMap<&str, f64> = multipliers
        .iter()
        .map(|(&i, &m)| (topology.services[i].as_str(), m))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut touched: BTreeSet<(i64, String)> = BTreeSet::new();
    let mut out = spans.to_vec();
    for span in &mut out {
        let Some(&w) = windows.get(&span.trace_id) else { continue };
        if !spec.affected_windows.contains(&w) {
            continue;
        }
        let Some(&m) = by_name.get(span.service_name.as_str()) else { continue };
        match spec.kind {
            AnomalyKind::LatencySpike | AnomalyKind::Cascade => {
                span.duration = ((span.duration as f64) * m).round() as i64;
                touched.insert((w, span.service_name.clone()));
            }
            AnomalyKind::ErrorBurst => {
                if rng.gen::<f64>() < m {
                    span.tags.insert("error".into(), "true".into());
                    touched.insert((w, span.service_name.clone()));
                }
            }
        }
    }

    let labels = touched
        .into_iter()
        .map(|(window_index, service_name)| LabelRecord {
            window_index,
            service_name,
            kind: spec.kind,
        })
        .collect();
    Ok((out, labels))
}

// --- scaling disturbances --------------------------------------------------

/// Elastic-scaling disturbance process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingSpec {
    /// Scaling events per simulated hour.
    pub frequency_per_hour: f64,
    /// Transient latency multiplier on the affected service.
    pub jitter_magnitude: f64,
    /// How many consecutive windows each event disturbs.
    pub affected_duration_windows: usize,
    pub seed: u64,
}

impl Default for ScalingSpec {
    fn default() -> Self {
        Self {
            frequency_per_hour: 0.0,
            jitter_magnitude: 2.0,
            affected_duration_windows: 1,
            seed: 0,
        }
    }
}

impl ScalingSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.frequency_per_hour >= 0.0 && self.frequency_per_hour.is_finite()) {
            return Err(Error::Config(format!(
                "frequency_per_hour must be non-negative, got {}",
                self.frequency_per_hour
            )));
        }
        if !(self.jitter_magnitude >= 0.0 && self.jitter_magnitude.is_finite()) {
            return Err(Error::Config(format!(
                "jitter_magnitude must be non-negative, got {}",
                self.jitter_magnitude
            )));
        }
        if self.affected_duration_windows == 0 {
            return Err(Error::Config(
                "affected_duration_windows must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// One logged scaling event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingEvent {
    pub time_us: i64,
    pub service: String,
    pub jitter_magnitude: f64,
    /// Span thinning (< 1) or duplication (> 1) factor, uniform in
    /// [0.5, 1.5].
    pub throughput_factor: f64,
}

const MICROS_PER_HOUR: f64 = 3_600_000_000.0;

/// Event arrival times in microseconds over `duration_hours`, drawn as a
/// Poisson process: exponential gaps `-ln(1 - u) / frequency` hours with
/// `u` uniform in [0, 1). The arrival stream consumes only this RNG, so a
/// replay with the same seed reproduces the count and times exactly.
fn poisson_arrivals(rng: &mut ChaCha8Rng, frequency_per_hour: f64, duration_hours: f64) -> Vec<i64> {
    let mut times = Vec::new();
    if frequency_per_hour <= 0.0 {
        return times;
    }
    let mut t = 0.0f64;
    loop {
        let u: f64 = rng.gen();
        t += -(1.0 - u).ln() / frequency_per_hour;
        if t >= duration_hours {
            return times;
        }
        times.push((t * MICROS_PER_HOUR) as i64);
    }
}

/// Apply elastic-scaling disturbances to a corpus.
///
/// Each event multiplies the durations of one uniformly chosen service by
/// `jitter_magnitude` for a run of windows and perturbs its throughput with
/// a factor in [0.5, 1.5]: below 1, affected spans are dropped with their
/// subtrees (the whole trace when the root goes); above 1, non-root spans
/// are duplicated as leaves with fresh ids. The output still parses as
/// valid traces.
pub fn apply_scaling(
    spans: &[SpanRecord],
    topology: &Topology,
    spec: &ScalingSpec,
    window_length_us: i64,
) -> Result<(Vec<SpanRecord>, Vec<ScalingEvent>)> {
    spec.validate()?;
    let (windows, max_window) = trace_windows(spans, window_length_us);
    let duration_hours = ((max_window + 1) as f64 * window_length_us as f64) / MICROS_PER_HOUR;

    let mut arrivals_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let arrival_times = poisson_arrivals(&mut arrivals_rng, spec.frequency_per_hour, duration_hours);
    let mut effects_rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(EFFECTS_STREAM));

    let mut corpus = spans.to_vec();
    let mut events = Vec::with_capacity(arrival_times.len());
    for (event_idx, time_us) in arrival_times.into_iter().enumerate() {
        let service = topology.services[effects_rng.gen_range(0..topology.services.len())].clone();
        let throughput_factor = effects_rng.gen_range(0.5..1.5);
        let w0 = time_us.div_euclid(window_length_us);
        let w1 = w0 + spec.affected_duration_windows as i64;
        apply_one_event(
            &mut corpus,
            &windows,
            &service,
            spec.jitter_magnitude,
            throughput_factor,
            w0..w1,
            event_idx,
            &mut effects_rng,
        );
        events.push(ScalingEvent {
            time_us,
            service,
            jitter_magnitude: spec.jitter_magnitude,
            throughput_factor,
        });
    }
    Ok((corpus, events))
}

#[allow(clippy::too_many_arguments)]
fn apply_one_event(
    corpus: &mut Vec<SpanRecord>,
    windows: &BTreeMap<String, i64>,
    service: &str,
    jitter: f64,
    factor: f64,
    window_range: std::ops::Range<i64>,
    event_idx: usize,
    rng: &mut ChaCha8Rng,
) {
    let affected = |span: &SpanRecord| {
        span.service_name == service
            && windows
                .get(&span.trace_id)
                .is_some_and(|w| window_range.contains(w))
    };

    let mut drop_roots: BTreeSet<(String, String)> = BTreeSet::new(); // (trace, span)
    let mut duplicates: Vec<SpanRecord> = Vec::new();
    for span in corpus.iter_mut() {
        if !affected(span) {
            continue;
        }
        span.duration = ((span.duration as f64) * jitter).round().max(0.0) as i64;
        if factor < 1.0 {
            if rng.gen::<f64>() < 1.0 - factor {
                drop_roots.insert((span.trace_id.clone(), span.span_id.clone()));
            }
        } else if factor > 1.0 && span.parent_span_id.is_some() && rng.gen::<f64>() < factor - 1.0 {
            let mut copy = span.clone();
            // Event-scoped suffix: a span is duplicated at most once per
            // event, so these ids never collide.
            copy.span_id = format!("{}-e{}", span.span_id, event_idx);
            duplicates.push(copy);
        }
    }

    if !drop_roots.is_empty() {
        // Expand each dropped span to its whole subtree within the trace.
        let mut children: BTreeMap<(String, String), Vec<(String, String)>> = BTreeMap::new();
        for span in corpus.iter() {
            if let Some(parent) = &span.parent_span_id {
                children
                    .entry((span.trace_id.clone(), parent.clone()))
                    .or_default()
                    .push((span.trace_id.clone(), span.span_id.clone()));
            }
        }
        let mut doomed: BTreeSet<(String, String)> = BTreeSet::new();
        let mut stack: Vec<(String, String)> = drop_roots.into_iter().collect();
        while let Some(key) = stack.pop() {
            if !doomed.insert(key.clone()) {
                continue;
            }
            if let Some(kids) = children.get(&key) {
                stack.extend(kids.iter().cloned());
            }
        }
        corpus.retain(|s| !doomed.contains(&(s.trace_id.clone(), s.span_id.clone())));
    }
    corpus.extend(duplicates);
}

// --- CSV output ------------------------------------------------------------

/// Labels as CSV: `window_index,service_name,kind`.
pub fn write_labels_csv<W: Write>(w: W, labels: &[LabelRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["window_index", "service_name", "kind"])?;
    for l in labels {
        wtr.write_record([
            l.window_index.to_string(),
            l.service_name.clone(),
            l.kind.as_str().to_string(),
        ])?;
    }
    wtr.flush().map_err(Error::Io)?;
    Ok(())
}

pub fn read_labels_csv<R: Read>(r: R) -> Result<Vec<LabelRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = || -> Option<LabelRecord> {
            Some(LabelRecord {
                window_index: rec.get(0)?.parse().ok()?,
                service_name: rec.get(1)?.to_string(),
                kind: rec.get(2)?.parse().ok()?,
            })
        };
        out.push(parse().ok_or_else(|| Error::InvalidScoreRecord {
            line: i + 2,
            reason: "expected window_index,service_name,kind".into(),
        })?);
    }
    Ok(out)
}

/// Scaling events as CSV: `time_us,service,jitter_magnitude,throughput_factor`.
pub fn write_events_csv<W: Write>(w: W, events: &[ScalingEvent]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["time_us", "service", "jitter_magnitude", "throughput_factor"])?;
    for e in events {
        wtr.write_record([
            e.time_us.to_string(),
            e.service.clone(),
            fmt_f64(e.jitter_magnitude),
            fmt_f64(e.throughput_factor),
        ])?;
    }
    wtr.flush().map_err(Error::Io)?;
    Ok(())
}
