//! Event data model, ingestion, chronological splits and temporal history
//! queries.
//!
//! A stream is an ordered list of timestamped `src -> dst` interactions.
//! Events are kept sorted by `(timestamp, event_id)`, and `event_id` always
//! equals the position of the event in its stream.
//!
//! History queries treat the graph as undirected: an event belongs to the
//! history of both endpoints, with the other endpoint reported as the
//! neighbor.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InjectedKind {
    /// Timestamp randomised.
    T,
    /// Destination randomised.
    S,
}

impl fmt::Display for InjectedKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InjectedKind::T => f.write_str("T"),
            InjectedKind::S => f.write_str("S"),
        }
    }
}

impl FromStr for InjectedKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "T" | "t" => Ok(InjectedKind::T),
            "S" | "s" => Ok(InjectedKind::S),
            other => Err(Error::Format(format!("unknown injected kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub event_id: usize,
    pub src: NodeId,
    pub dst: NodeId,
    pub timestamp: f64,
    pub edge_features: Vec<f64>,
    /// `Some(0)` normal, `Some(1)` anomalous, `None` unlabeled.
    pub label: Option<u8>,
    pub injected_kind: Option<InjectedKind>,
}

impl Event {
    pub fn new(src: NodeId, dst: NodeId, timestamp: f64, edge_features: Vec<f64>) -> Self {
        Event {
            event_id: 0,
            src,
            dst,
            timestamp,
            edge_features,
            label: None,
            injected_kind: None,
        }
    }

    pub fn with_label(mut self, label: u8) -> Self {
        self.label = Some(label);
        self
    }

    /// Unlabeled events count as normal.
    pub fn is_anomalous(&self) -> bool {
        self.label == Some(1)
    }
}

/// Chronologically ordered events over a fixed node universe.
#[derive(Clone, Debug)]
pub struct EventStream {
    events: Vec<Event>,
    num_nodes: usize,
    feature_dim: usize,
    /// Per node, positions of the events touching it, ascending.
    incidence: Vec<Vec<usize>>,
}

impl PartialEq for EventStream {
    fn eq(&self, other: &Self) -> bool {
        self.num_nodes == other.num_nodes
            && self.feature_dim == other.feature_dim
            && self.events == other.events
    }
}

impl EventStream {
    /// Validates the events, sorts them stably by timestamp (input order breaks
    /// ties) and renumbers `event_id` to stream positions.
    pub fn new(mut events: Vec<Event>, num_nodes: usize, feature_dim: usize) -> Result<Self> {
        for (i, e) in events.iter().enumerate() {
            if !e.timestamp.is_finite() {
                return Err(Error::Format(format!(
                    "event {i}: timestamp {} is not sortable",
                    e.timestamp
                )));
            }
            if e.src >= num_nodes || e.dst >= num_nodes {
                return Err(Error::Format(format!(
                    "event {i}: node id out of range for {num_nodes} nodes"
                )));
            }
            if e.edge_features.len() != feature_dim {
                return Err(Error::Format(format!(
                    "event {i}: {} edge features, expected {feature_dim}",
                    e.edge_features.len()
                )));
            }
            if let Some(l) = e.label {
                if l > 1 {
                    return Err(Error::Format(format!("event {i}: label {l} is not binary")));
                }
            }
        }
        events.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        for (i, e) in events.iter_mut().enumerate() {
            e.event_id = i;
        }
        let mut incidence = vec![Vec::new(); num_nodes];
        for (i, e) in events.iter().enumerate() {
            incidence[e.src].push(i);
            if e.dst != e.src {
                incidence[e.dst].push(i);
            }
        }
        Ok(EventStream {
            events,
            num_nodes,
            feature_dim,
            incidence,
        })
    }

    pub fn empty(num_nodes: usize, feature_dim: usize) -> Self {
        EventStream::new(Vec::new(), num_nodes, feature_dim).expect("empty stream is valid")
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn event(&self, id: usize) -> &Event {
        &self.events[id]
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }

    /// `(min, max)` timestamp, or `None` when empty.
    pub fn time_range(&self) -> Option<(f64, f64)> {
        Some((self.events.first()?.timestamp, self.events.last()?.timestamp))
    }

    pub fn anomaly_count(&self) -> usize {
        self.events.iter().filter(|e| e.is_anomalous()).count()
    }

    /// The up-to-`max_len` most recent interactions of `node` strictly before
    /// `(t, before_event)` in `(timestamp, event_id)` order, oldest first.
    pub fn sample_history(&self, node: NodeId, t: f64, before_event: usize, max_len: usize) -> HistorySample {
        let entries = self
            .history_ids(node, t, before_event, max_len)
            .iter()
            .map(|&i| {
                let e = &self.events[i];
                HistoryEntry {
                    event_id: i,
                    neighbor: if e.src == node { e.dst } else { e.src },
                    edge_features: e.edge_features.clone(),
                    timestamp: e.timestamp,
                }
            })
            .collect();
        HistorySample { entries }
    }

    /// Event positions of [`sample_history`](Self::sample_history).
    pub fn history_ids(&self, node: NodeId, t: f64, before_event: usize, max_len: usize) -> &[usize] {
        let Some(list) = self.incidence.get(node) else {
            return &[];
        };
        let end = list.partition_point(|&i| {
            let e = &self.events[i];
            e.timestamp < t || (e.timestamp == t && i < before_event)
        });
        &list[end.saturating_sub(max_len)..end]
    }

    /// Input sequences of both endpoints of `event`, with and without the
    /// event itself.
    pub fn build_sequences(&self, event: &Event, max_len: usize) -> EventSequences {
        let side = |owner: NodeId, other: NodeId| {
            let hist = self.sample_history(owner, event.timestamp, event.event_id, max_len);
            let without: Vec<SeqEntry> = hist
                .entries
                .into_iter()
                .map(|h| SeqEntry {
                    neighbor: h.neighbor,
                    edge_features: h.edge_features,
                    timestamp: h.timestamp,
                })
                .collect();
            let mut with = without.clone();
            with.push(SeqEntry {
                neighbor: other,
                edge_features: event.edge_features.clone(),
                timestamp: event.timestamp,
            });
            SequencePair {
                with_event: Sequence {
                    owner,
                    query_time: event.timestamp,
                    entries: with,
                },
                without_event: Sequence {
                    owner,
                    query_time: event.timestamp,
                    entries: without,
                },
            }
        };
        EventSequences {
            src: side(event.src, event.dst),
            dst: side(event.dst, event.src),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryEntry {
    pub event_id: usize,
    pub neighbor: NodeId,
    pub edge_features: Vec<f64>,
    pub timestamp: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct HistorySample {
    pub entries: Vec<HistoryEntry>,
}

impl HistorySample {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqEntry {
    pub neighbor: NodeId,
    pub edge_features: Vec<f64>,
    pub timestamp: f64,
}

/// Temporally ordered interactions of `owner`, encoded relative to `query_time`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub owner: NodeId,
    pub query_time: f64,
    pub entries: Vec<SeqEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequencePair {
    pub with_event: Sequence,
    pub without_event: Sequence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventSequences {
    pub src: SequencePair,
    pub dst: SequencePair,
}

/// Fractions of the train / validation / test prefixes.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_frac: 0.4,
            val_frac: 0.2,
            test_frac: 0.4,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("train", self.train_frac),
            ("validation", self.val_frac),
            ("test", self.test_frac),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::config(format!("{name} fraction {f} outside (0, 1)")));
            }
        }
        let sum = self.train_frac + self.val_frac + self.test_frac;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("split fractions sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// `(floor(train * n), floor(val * n), remainder)`.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let floor = |f: f64| ((f * n as f64) + 1e-9).floor() as usize;
        let train = floor(self.train_frac).min(n);
        let val = floor(self.val_frac).min(n - train);
        (train, val, n - train - val)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: EventStream,
    pub val: EventStream,
    pub test: EventStream,
}

/// Contiguous prefixes by event count. Each split keeps the full node universe.
pub fn chronological_split(stream: &EventStream, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    if stream.is_empty() {
        return Err(Error::config("cannot split an empty stream"));
    }
    let (n_train, n_val, n_test) = spec.sizes(stream.len());
    for (name, n) in [("training", n_train), ("validation", n_val), ("test", n_test)] {
        if n == 0 {
            return Err(Error::config(format!("empty {name} split")));
        }
    }
    let part = |range: std::ops::Range<usize>| {
        EventStream::new(
            stream.events[range].to_vec(),
            stream.num_nodes,
            stream.feature_dim,
        )
    };
    Ok(Splits {
        train: part(0..n_train)?,
        val: part(n_train..n_train + n_val)?,
        test: part(n_train + n_val..stream.len())?,
    })
}

/// Concatenates consecutive splits back into one cumulative stream and
/// returns the position range of each part.
pub fn concat_splits(parts: &[&EventStream]) -> Result<(EventStream, Vec<std::ops::Range<usize>>)> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("no splits to concatenate"))?;
    let mut events = Vec::new();
    let mut ranges = Vec::new();
    let mut last_ts = f64::NEG_INFINITY;
    for p in parts {
        if let Some((lo, hi)) = p.time_range() {
            if lo < last_ts {
                return Err(Error::Format(
                    "splits overlap in time and cannot be concatenated".into(),
                ));
            }
            last_ts = hi;
        }
        let start = events.len();
        events.extend(p.events.iter().cloned());
        ranges.push(start..events.len());
    }
    let stream = EventStream::new(events, first.num_nodes, first.feature_dim)?;
    Ok((stream, ranges))
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamFormat {
    Csv,
    Jsonl,
}

impl FromStr for StreamFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(StreamFormat::Csv),
            "jsonl" | "ndjson" => Ok(StreamFormat::Jsonl),
            other => Err(Error::config(format!("unknown stream format {other:?}"))),
        }
    }
}

impl StreamFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "csv" => Some(StreamFormat::Csv),
            "jsonl" | "ndjson" => Some(StreamFormat::Jsonl),
            _ => None,
        }
    }
}

/// How raw node identifiers map to dense ids.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeIds {
    /// Dense ids in order of first appearance.
    #[default]
    Remap,
    /// Ids are already dense non-negative integers.
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadOptions {
    pub format: StreamFormat,
    pub node_ids: NodeIds,
    /// Width of the zero feature vector used when the file has no feature columns.
    pub default_feature_dim: usize,
}

impl LoadOptions {
    pub fn new(format: StreamFormat) -> Self {
        LoadOptions {
            format,
            node_ids: NodeIds::Remap,
            default_feature_dim: 0,
        }
    }
}

/// Raw-to-dense node id table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NodeMap {
    raw: Vec<String>,
    index: HashMap<String, NodeId>,
}

impl NodeMap {
    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn raw(&self, id: NodeId) -> Option<&str> {
        self.raw.get(id).map(String::as_str)
    }

    pub fn dense(&self, raw: &str) -> Option<NodeId> {
        self.index.get(raw).copied()
    }

    fn intern(&mut self, raw: &str) -> NodeId {
        if let Some(&id) = self.index.get(raw) {
            return id;
        }
        let id = self.raw.len();
        self.raw.push(raw.to_string());
        self.index.insert(raw.to_string(), id);
        id
    }

    /// Two-column CSV `dense_id,raw_id`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["dense_id", "raw_id"])?;
        for (i, raw) in self.raw.iter().enumerate() {
            w.write_record([i.to_string(), raw.clone()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut map = NodeMap::default();
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            let dense: usize = rec
                .get(0)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| parse_err(path, row + 2, "bad dense_id"))?;
            let raw = rec.get(1).ok_or_else(|| parse_err(path, row + 2, "missing raw_id"))?;
            if map.intern(raw) != dense {
                return Err(parse_err(path, row + 2, "dense ids must be 0..n in order"));
            }
        }
        Ok(map)
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

struct RawRow {
    src: String,
    dst: String,
    ts: f64,
    label: Option<u8>,
    kind: Option<InjectedKind>,
    features: Vec<f64>,
}

fn parse_label(s: &str) -> std::result::Result<Option<u8>, String> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(None);
    }
    match s.parse::<f64>() {
        Ok(v) if v == 0.0 => Ok(Some(0)),
        Ok(v) if v == 1.0 => Ok(Some(1)),
        _ => Err(format!("label {s:?} is not 0 or 1")),
    }
}

fn feature_index(name: &str) -> Option<usize> {
    name.strip_prefix('f')?.parse().ok()
}

fn read_csv_rows(path: &Path) -> Result<Vec<RawRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(false)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Ok(Vec::new());
    }
    let col = |names: &[&str]| headers.iter().position(|h| names.contains(&h));
    let src_col = col(&["src", "source", "u"]).ok_or_else(|| parse_err(path, 1, "missing src column"))?;
    let dst_col = col(&["dst", "destination", "i"]).ok_or_else(|| parse_err(path, 1, "missing dst column"))?;
    let ts_col = col(&["ts", "timestamp", "t"]).ok_or_else(|| parse_err(path, 1, "missing ts column"))?;
    let label_col = col(&["label"]);
    let kind_col = col(&["injected_kind"]);
    let mut feat_cols: Vec<(usize, usize)> = headers
        .iter()
        .enumerate()
        .filter_map(|(c, h)| feature_index(h).map(|k| (k, c)))
        .collect();
    feat_cols.sort_unstable();

    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let field = |c: usize| rec.get(c).unwrap_or("");
        let ts: f64 = field(ts_col)
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad timestamp {:?}", field(ts_col))))?;
        let label = match label_col {
            Some(c) => parse_label(field(c)).map_err(|m| parse_err(path, line, m))?,
            None => None,
        };
        let kind = match kind_col.map(field).filter(|s| !s.is_empty()) {
            Some(s) => Some(s.parse().map_err(|e: Error| parse_err(path, line, e.to_string()))?),
            None => None,
        };
        let features = feat_cols
            .iter()
            .map(|&(_, c)| {
                field(c)
                    .parse::<f64>()
                    .map_err(|_| parse_err(path, line, format!("bad feature {:?}", field(c))))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(RawRow {
            src: field(src_col).to_string(),
            dst: field(dst_col).to_string(),
            ts,
            label,
            kind,
            features,
        });
    }
    Ok(rows)
}

fn json_id(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn read_jsonl_rows(path: &Path) -> Result<Vec<RawRow>> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let obj: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&line)
            .map_err(|e| parse_err(path, lineno, e.to_string()))?;
        let get_id = |k: &str| {
            obj.get(k)
                .and_then(json_id)
                .ok_or_else(|| parse_err(path, lineno, format!("missing or invalid {k}")))
        };
        let ts = obj
            .get("ts")
            .or_else(|| obj.get("timestamp"))
            .and_then(serde_json::Value::as_f64)
            .ok_or_else(|| parse_err(path, lineno, "missing or invalid ts"))?;
        let label = match obj.get("label") {
            None | Some(serde_json::Value::Null) => None,
            Some(v) => {
                let s = v.to_string();
                parse_label(&s).map_err(|m| parse_err(path, lineno, m))?
            }
        };
        let kind = match obj.get("injected_kind").and_then(|v| v.as_str()) {
            Some(s) => Some(s.parse().map_err(|e: Error| parse_err(path, lineno, e.to_string()))?),
            None => None,
        };
        let mut feats: Vec<(usize, f64)> = Vec::new();
        for (k, v) in &obj {
            if let Some(idx) = feature_index(k) {
                let x = v
                    .as_f64()
                    .ok_or_else(|| parse_err(path, lineno, format!("bad feature {k}")))?;
                feats.push((idx, x));
            }
        }
        feats.sort_by_key(|&(k, _)| k);
        rows.push(RawRow {
            src: get_id("src")?,
            dst: get_id("dst")?,
            ts,
            label,
            kind,
            features: feats.into_iter().map(|(_, x)| x).collect(),
        });
    }
    Ok(rows)
}

/// Reads a stream file. Rows are sorted stably by timestamp; node ids are
/// mapped according to `opts.node_ids`.
pub fn load_stream(path: &Path, opts: &LoadOptions) -> Result<(EventStream, NodeMap)> {
    let rows = match opts.format {
        StreamFormat::Csv => read_csv_rows(path)?,
        StreamFormat::Jsonl => read_jsonl_rows(path)?,
    };
    let feature_dim = match rows.first() {
        Some(r) if !r.features.is_empty() => r.features.len(),
        _ => opts.default_feature_dim,
    };
    let mut map = NodeMap::default();
    let mut max_id = 0usize;
    let mut events = Vec::with_capacity(rows.len());
    for (i, row) in rows.into_iter().enumerate() {
        let (src, dst) = match opts.node_ids {
            NodeIds::Remap => (map.intern(&row.src), map.intern(&row.dst)),
            NodeIds::Identity => {
                let parse = |s: &str| {
                    s.parse::<usize>().map_err(|_| {
                        Error::Format(format!("row {}: node id {s:?} is not a dense integer", i + 1))
                    })
                };
                (parse(&row.src)?, parse(&row.dst)?)
            }
        };
        max_id = max_id.max(src).max(dst);
        let features = if row.features.is_empty() {
            vec![0.0; feature_dim]
        } else {
            row.features
        };
        if features.len() != feature_dim {
            return Err(Error::Format(format!(
                "row {}: {} features, expected {feature_dim}",
                i + 1,
                features.len()
            )));
        }
        events.push(Event {
            event_id: i,
            src,
            dst,
            timestamp: row.ts,
            edge_features: features,
            label: row.label,
            injected_kind: row.kind,
        });
    }
    let num_nodes = match opts.node_ids {
        NodeIds::Remap => map.len(),
        NodeIds::Identity if events.is_empty() => 0,
        NodeIds::Identity => {
            for id in 0..=max_id {
                map.intern(&id.to_string());
            }
            max_id + 1
        }
    };
    let stream = EventStream::new(events, num_nodes, feature_dim)?;
    Ok((stream, map))
}

/// Writes `src,dst,ts,label,injected_kind,f0..` with dense ids.
pub fn save_stream_csv(stream: &EventStream, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    write_stream_csv(stream, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_stream_csv<W: Write>(stream: &EventStream, w: &mut csv::Writer<W>) -> Result<()> {
    let mut header: Vec<String> = ["src", "dst", "ts", "label", "injected_kind"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..stream.feature_dim()).map(|k| format!("f{k}")));
    w.write_record(&header)?;
    for e in stream.events() {
        let mut rec = vec![
            e.src.to_string(),
            e.dst.to_string(),
            format_f64(e.timestamp),
            e.label.unwrap_or(0).to_string(),
            e.injected_kind.map(|k| k.to_string()).unwrap_or_default(),
        ];
        rec.extend(e.edge_features.iter().map(|&x| format_f64(x)));
        w.write_record(&rec)?;
    }
    Ok(())
}

/// Shortest representation that parses back to the same value.
pub fn format_f64(x: f64) -> String {
    format!("{x:?}")
}
