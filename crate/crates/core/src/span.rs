//! Span ingestion: NDJSON parsing, trace reconstruction, call paths.
//!
//! Input is one JSON span per line in the shape emitted by Jaeger-style
//! tracers. Malformed lines are never silently dropped: each one is recorded
//! as a [`RejectedLine`] with its 1-based line number and a reason, while
//! well-formed lines keep flowing. Structural problems at the *trace* level
//! (no root, several roots, dangling parents, parent cycles) are hard errors
//! raised by [`build_trace_tree`].

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

/// One timestamped log line attached to a span.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub ts: i64,
    pub message: String,
}

/// A single span. Timestamps and durations are integer microseconds.
///
/// Unknown JSON fields are ignored on parse; `tags` and `logs` default to
/// empty. A span with no `parent_span_id` is a trace root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanRecord {
    pub trace_id: String,
    pub span_id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub parent_span_id: Option<String>,
    pub service_name: String,
    pub operation_name: String,
    pub start_ts: i64,
    pub duration: i64,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub tags: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub logs: Vec<LogEntry>,
}

impl SpanRecord {
    pub fn is_root(&self) -> bool {
        self.parent_span_id.is_none()
    }

    /// True when the span carries `tags.error == "true"`.
    pub fn is_error(&self) -> bool {
        self.tags.get("error").map(String::as_str) == Some("true")
    }

    /// True when the span carries `tags.timeout == "true"`.
    pub fn is_timeout(&self) -> bool {
        self.tags.get("timeout").map(String::as_str) == Some("true")
    }

    /// Parsed `tags.retry_count`, defaulting to zero. Validation guarantees
    /// the tag parses on records accepted by [`parse_spans`].
    pub fn retry_count(&self) -> u64 {
        self.tags
            .get("retry_count")
            .and_then(|v| v.parse().ok())
            .unwrap_or(0)
    }

    /// Schema checks beyond JSON well-formedness. Returns the rejection
    /// reason on failure.
    fn validate(&self) -> std::result::Result<(), String> {
        if self.span_id.is_empty() {
            return Err("empty span_id".to_string());
        }
        if self.duration < 0 {
            return Err("negative duration".to_string());
        }
        if self.parent_span_id.as_deref() == Some(self.span_id.as_str()) {
            return Err("span is its own parent".to_string());
        }
        for key in ["error", "timeout"] {
            if let Some(v) = self.tags.get(key) {
                if v != "true" && v != "false" {
                    return Err(format!("tag {} must be \"true\" or \"false\", got {:?}", key, v));
                }
            }
        }
        if let Some(v) = self.tags.get("retry_count") {
            if v.parse::<u64>().is_err() {
                return Err(format!("tag retry_count must be a non-negative integer, got {:?}", v));
            }
        }
        Ok(())
    }
}

/// A line that failed to parse or validate, with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedLine {
    pub line_no: usize,
    pub reason: String,
}

/// Parse newline-delimited JSON spans. Blank lines are skipped; every other
/// line either yields a record or a [`RejectedLine`]. Only I/O failures are
/// hard errors.
pub fn parse_spans<R: BufRead>(reader: R) -> Result<(Vec<SpanRecord>, Vec<RejectedLine>)> {
    let mut spans = Vec::new();
    let mut rejects = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<SpanRecord>(&line) {
            Ok(span) => match span.validate() {
                Ok(()) => spans.push(span),
                Err(reason) => rejects.push(RejectedLine { line_no, reason }),
            },
            Err(e) => rejects.push(RejectedLine {
                line_no,
                reason: e.to_string(),
            }),
        }
    }
    Ok((spans, rejects))
}

/// Serialize records back to NDJSON. Re-parsing the output reproduces the
/// input records exactly.
pub fn write_ndjson<W: Write, T: Serialize>(mut writer: W, records: &[T]) -> Result<()> {
    for record in records {
        serde_json::to_writer(&mut writer, record)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Group spans by `trace_id` (sorted), keeping input order within each trace.
pub fn group_by_trace(spans: Vec<SpanRecord>) -> BTreeMap<String, Vec<SpanRecord>> {
    let mut traces: BTreeMap<String, Vec<SpanRecord>> = BTreeMap::new();
    for span in spans {
        traces.entry(span.trace_id.clone()).or_default().push(span);
    }
    traces
}

/// A reconstructed trace: exactly one root, acyclic, child lists ordered by
/// `(start_ts, span_id)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceTree {
    trace_id: String,
    root_id: String,
    spans: BTreeMap<String, SpanRecord>,
    children: BTreeMap<String, Vec<String>>,
    span_count: usize,
}

impl TraceTree {
    pub fn trace_id(&self) -> &str {
        &self.trace_id
    }

    pub fn root(&self) -> &SpanRecord {
        &self.spans[&self.root_id]
    }

    pub fn span(&self, span_id: &str) -> Option<&SpanRecord> {
        self.spans.get(span_id)
    }

    /// Child span ids of `span_id`, ordered by `(start_ts, span_id)`.
    pub fn children_of(&self, span_id: &str) -> &[String] {
        self.children.get(span_id).map_or(&[], Vec::as_slice)
    }

    pub fn span_count(&self) -> usize {
        self.span_count
    }

    /// All spans in the trace, keyed by span id.
    pub fn spans(&self) -> impl Iterator<Item = &SpanRecord> {
        self.spans.values()
    }
}

/// Reconstruct the tree for one trace. All spans must share a `trace_id`;
/// zero or several roots, unresolved parents, duplicate span ids and parent
/// cycles are structured errors naming the offending spans.
pub fn build_trace_tree(spans: &[SpanRecord]) -> Result<TraceTree> {
    if spans.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let trace_id = spans[0].trace_id.clone();
    let distinct: BTreeSet<&str> = spans.iter().map(|s| s.trace_id.as_str()).collect();
    if distinct.len() > 1 {
        return Err(Error::MixedTraceIds(
            distinct.into_iter().map(String::from).collect(),
        ));
    }

    let mut by_id: BTreeMap<String, SpanRecord> = BTreeMap::new();
    for span in spans {
        if by_id.insert(span.span_id.clone(), span.clone()).is_some() {
            return Err(Error::DuplicateSpanId {
                trace_id,
                span_id: span.span_id.clone(),
            });
        }
    }

    let dangling: Vec<String> = by_id
        .values()
        .filter(|s| {
            s.parent_span_id
                .as_deref()
                .is_some_and(|p| !by_id.contains_key(p))
        })
        .map(|s| s.span_id.clone())
        .collect();
    if !dangling.is_empty() {
        return Err(Error::DanglingParent {
            trace_id,
            span_ids: dangling,
        });
    }

    let roots: Vec<String> = by_id
        .values()
        .filter(|s| s.is_root())
        .map(|s| s.span_id.clone())
        .collect();
    if roots.len() > 1 {
        return Err(Error::MultipleRoots {
            trace_id,
            span_ids: roots,
        });
    }
    if roots.is_empty() {
        // Every parent resolves and nothing is a root, so a parent cycle
        // must exist; name it.
        let start = by_id.keys().next().expect("non-empty").clone();
        return Err(Error::ParentCycle {
            trace_id,
            span_ids: find_parent_cycle(&by_id, &start),
        });
    }
    let root_id = roots.into_iter().next().expect("checked");

    let mut children: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for span in by_id.values() {
        if let Some(parent) = &span.parent_span_id {
            children
                .entry(parent.clone())
                .or_default()
                .push(span.span_id.clone());
        }
    }
    for list in children.values_mut() {
        list.sort_by(|a, b| {
            let (ta, tb) = (by_id[a].start_ts, by_id[b].start_ts);
            ta.cmp(&tb).then_with(|| a.cmp(b))
        });
    }

    // Spans not reachable from the root hang off a parent cycle.
    let mut reachable: BTreeSet<&str> = BTreeSet::new();
    let mut stack = vec![root_id.as_str()];
    while let Some(id) = stack.pop() {
        if reachable.insert(id) {
            if let Some(kids) = children.get(id) {
                stack.extend(kids.iter().map(String::as_str));
            }
        }
    }
    if reachable.len() < by_id.len() {
        let start = by_id
            .keys()
            .find(|id| !reachable.contains(id.as_str()))
            .expect("unreachable span exists")
            .clone();
        return Err(Error::ParentCycle {
            trace_id,
            span_ids: find_parent_cycle(&by_id, &start),
        });
    }

    let span_count = by_id.len();
    Ok(TraceTree {
        trace_id,
        root_id,
        spans: by_id,
        children,
        span_count,
    })
}

/// Walk parent pointers from `start` until a span repeats, then return the
/// cycle's span ids in sorted order. Callers guarantee a cycle is reachable.
fn find_parent_cycle(by_id: &BTreeMap<String, SpanRecord>, start: &str) -> Vec<String> {
    let mut seen: Vec<&str> = Vec::new();
    let mut cur = start;
    loop {
        if let Some(pos) = seen.iter().position(|&s| s == cur) {
            let mut cycle: Vec<String> = seen[pos..].iter().map(|s| s.to_string()).collect();
            cycle.sort();
            return cycle;
        }
        seen.push(cur);
        cur = by_id[cur]
            .parent_span_id
            .as_deref()
            .expect("parent chain off a root cannot cycle");
    }
}

/// A root-to-leaf call chain through one trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallPath {
    /// Service of each hop, root first.
    pub services: Vec<String>,
    /// Span id of each hop, parallel to `services`.
    pub span_ids: Vec<String>,
    /// Index of the time window the owning trace was assigned to.
    pub window_index: i64,
}

impl CallPath {
    pub fn with_window(mut self, window_index: i64) -> Self {
        self.window_index = window_index;
        self
    }

    pub fn len(&self) -> usize {
        self.services.len()
    }

    pub fn is_empty(&self) -> bool {
        self.services.is_empty()
    }
}

/// One [`CallPath`] per leaf, in depth-first order with children visited in
/// their stored `(start_ts, span_id)` order. `window_index` is left at zero;
/// window-aware callers attach it via [`CallPath::with_window`].
pub fn extract_call_paths(tree: &TraceTree) -> Vec<CallPath> {
    let mut paths = Vec::new();
    // Iterative DFS; each stack entry carries the prefix up to that span.
    let mut stack: Vec<(String, Vec<String>, Vec<String>)> = vec![(
        tree.root_id.clone(),
        vec![tree.root().service_name.clone()],
        vec![tree.root_id.clone()],
    )];
    while let Some((id, services, span_ids)) = stack.pop() {
        let kids = tree.children_of(&id);
        if kids.is_empty() {
            paths.push(CallPath {
                services,
                span_ids,
                window_index: 0,
            });
            continue;
        }
        // Reverse so the earliest child is processed first off the stack.
        for kid in kids.iter().rev() {
            let mut s = services.clone();
            let mut ids = span_ids.clone();
            s.push(tree.spans[kid].service_name.clone());
            ids.push(kid.clone());
            stack.push((kid.clone(), s, ids));
        }
    }
    paths
}
