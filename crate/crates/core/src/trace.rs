//! Execution-trace data model and the newline-delimited JSON trace format.
//!
//! A trace file is UTF-8 text with one JSON record per line. An optional
//! first line `{"format":"semflow-v1"}` tags the file. Execution headers
//! (`"type":"exec"`) must precede the events (`"type":"event"`) that refer
//! to them; events of different executions may interleave.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub const TRACE_FORMAT: &str = "semflow-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Pass,
    Fail,
    #[default]
    Unknown,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Pass => "pass",
            Outcome::Fail => "fail",
            Outcome::Unknown => "unknown",
        }
    }

    /// Pass and fail trade places; unknown stays unknown.
    pub fn swapped(self) -> Self {
        match self {
            Outcome::Pass => Outcome::Fail,
            Outcome::Fail => Outcome::Pass,
            Outcome::Unknown => Outcome::Unknown,
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Vector,
    Token,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EventKind::Vector => f.write_str("vector"),
            EventKind::Token => f.write_str("token"),
        }
    }
}

/// Raw execution data recorded at one step.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Vector(Vec<f64>),
    Token(String),
}

impl Payload {
    pub fn kind(&self) -> EventKind {
        match self {
            Payload::Vector(_) => EventKind::Vector,
            Payload::Token(_) => EventKind::Token,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub exec_id: String,
    pub step: u64,
    pub space_id: String,
    pub payload: Payload,
}

impl TraceEvent {
    pub fn vector(exec_id: impl Into<String>, step: u64, space: impl Into<String>, v: Vec<f64>) -> Self {
        Self { exec_id: exec_id.into(), step, space_id: space.into(), payload: Payload::Vector(v) }
    }

    pub fn token(exec_id: impl Into<String>, step: u64, space: impl Into<String>, t: impl Into<String>) -> Self {
        Self { exec_id: exec_id.into(), step, space_id: space.into(), payload: Payload::Token(t.into()) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Execution {
    pub exec_id: String,
    pub outcome: Outcome,
    /// Free-form header metadata (e.g. `"class"` for ground-truth labels).
    pub meta: BTreeMap<String, Value>,
    pub events: Vec<TraceEvent>,
}

impl Execution {
    pub fn new(exec_id: impl Into<String>, outcome: Outcome) -> Self {
        Self { exec_id: exec_id.into(), outcome, meta: BTreeMap::new(), events: Vec::new() }
    }

    /// Appends an event at the next step index.
    pub fn push_vector(&mut self, space: impl Into<String>, v: Vec<f64>) -> &mut Self {
        let step = self.next_step();
        self.events.push(TraceEvent::vector(self.exec_id.clone(), step, space, v));
        self
    }

    pub fn push_token(&mut self, space: impl Into<String>, t: impl Into<String>) -> &mut Self {
        let step = self.next_step();
        self.events.push(TraceEvent::token(self.exec_id.clone(), step, space, t));
        self
    }

    fn next_step(&self) -> u64 {
        self.events.last().map_or(0, |e| e.step + 1)
    }

    /// Ground-truth class label from the `"class"` header field, if present.
    pub fn class_label(&self) -> Option<String> {
        match self.meta.get("class")? {
            Value::String(s) => Some(s.clone()),
            Value::Null => None,
            other => Some(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpaceKind {
    Continuous,
    Discrete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SpaceRole {
    #[default]
    Semantic,
    Control,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceConfig {
    #[serde(rename = "id")]
    pub space_id: String,
    #[serde(rename = "kind")]
    pub space_kind: SpaceKind,
    #[serde(default)]
    pub role: SpaceRole,
    #[serde(default)]
    pub projection_dim: Option<usize>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub epsilon: Option<f64>,
}

impl SpaceConfig {
    pub fn continuous(id: impl Into<String>) -> Self {
        Self {
            space_id: id.into(),
            space_kind: SpaceKind::Continuous,
            role: SpaceRole::Semantic,
            projection_dim: None,
            k: None,
            epsilon: None,
        }
    }

    pub fn discrete(id: impl Into<String>) -> Self {
        Self { space_kind: SpaceKind::Discrete, ..Self::continuous(id) }
    }

    pub fn control(id: impl Into<String>) -> Self {
        Self { role: SpaceRole::Control, ..Self::discrete(id) }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = Some(k);
        self
    }

    pub fn with_projection(mut self, q: usize) -> Self {
        self.projection_dim = Some(q);
        self
    }

    pub fn with_epsilon(mut self, eps: f64) -> Self {
        self.epsilon = Some(eps);
        self
    }

    fn accepts(&self, kind: EventKind) -> bool {
        matches!(
            (self.space_kind, kind),
            (SpaceKind::Continuous, EventKind::Vector) | (SpaceKind::Discrete, EventKind::Token)
        )
    }
}

/// Contents of a space configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpacesFile {
    pub spaces: Vec<SpaceConfig>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl SpacesFile {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Derives one semantic space per space id seen in the trace: vector events
/// give continuous spaces, token events discrete ones. Order is first
/// appearance.
pub fn infer_space_configs(executions: &[Execution]) -> Vec<SpaceConfig> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for ev in executions.iter().flat_map(|e| &e.events) {
        if seen.insert(ev.space_id.clone()) {
            out.push(match ev.payload {
                Payload::Vector(_) => SpaceConfig::continuous(&ev.space_id),
                Payload::Token(_) => SpaceConfig::discrete(&ev.space_id),
            });
        }
    }
    out
}

#[derive(Debug, Error, PartialEq)]
pub enum TraceError {
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("line {line}: event for execution '{exec_id}' precedes its header")]
    UnknownExecution { line: usize, exec_id: String },
    #[error("line {line}: duplicate header for execution '{exec_id}'")]
    DuplicateExecution { line: usize, exec_id: String },
    #[error(
        "line {line}: execution '{exec_id}' step {step}: space '{space_id}' expects dimension {expected}, got {found}"
    )]
    DimensionMismatch { line: usize, exec_id: String, step: u64, space_id: String, expected: usize, found: usize },
    #[error("line {line}: execution '{exec_id}' step {step}: non-finite vector entry")]
    NonFiniteValue { line: usize, exec_id: String, step: u64 },
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Record {
    Exec {
        exec_id: String,
        #[serde(default)]
        outcome: Option<Outcome>,
        #[serde(default)]
        meta: Option<Map<String, Value>>,
    },
    Event {
        exec_id: String,
        step: u64,
        space: String,
        kind: EventKind,
        #[serde(default)]
        vector: Option<Vec<f64>>,
        #[serde(default)]
        token: Option<String>,
    },
}

/// Parses a whole trace in one streaming pass.
pub fn parse_trace<R: BufRead>(reader: R) -> Result<Vec<Execution>, TraceError> {
    let mut execs: Vec<Execution> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    let mut dims: HashMap<String, usize> = HashMap::new();
    let mut first_record = true;

    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| TraceError::Io(e.to_string()))?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        let malformed = |reason: String| TraceError::MalformedRecord { line: line_no, reason };
        let value: Value = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;

        let is_first = std::mem::replace(&mut first_record, false);
        if let Some(obj) = value.as_object() {
            if !obj.contains_key("type") && obj.contains_key("format") {
                if !is_first {
                    return Err(malformed("format tag must be the first record".into()));
                }
                match obj.get("format").and_then(Value::as_str) {
                    Some(TRACE_FORMAT) => continue,
                    other => return Err(malformed(format!("unsupported format {other:?}"))),
                }
            }
        }

        let record: Record = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
        match record {
            Record::Exec { exec_id, outcome, meta } => {
                if by_id.contains_key(&exec_id) {
                    return Err(TraceError::DuplicateExecution { line: line_no, exec_id });
                }
                by_id.insert(exec_id.clone(), execs.len());
                let mut exec = Execution::new(exec_id, outcome.unwrap_or_default());
                exec.meta = meta.map(|m| m.into_iter().collect()).unwrap_or_default();
                execs.push(exec);
            }
            Record::Event { exec_id, step, space, kind, vector, token } => {
                let Some(&idx) = by_id.get(&exec_id) else {
                    return Err(TraceError::UnknownExecution { line: line_no, exec_id });
                };
                let payload = match (kind, vector, token) {
                    (EventKind::Vector, Some(v), None) => {
                        if v.iter().any(|x| !x.is_finite()) {
                            return Err(TraceError::NonFiniteValue { line: line_no, exec_id, step });
                        }
                        let expected = *dims.entry(space.clone()).or_insert(v.len());
                        if expected != v.len() {
                            return Err(TraceError::DimensionMismatch {
                                line: line_no,
                                exec_id,
                                step,
                                space_id: space,
                                expected,
                                found: v.len(),
                            });
                        }
                        Payload::Vector(v)
                    }
                    (EventKind::Token, None, Some(t)) => Payload::Token(t),
                    (EventKind::Vector, _, _) => {
                        return Err(malformed("vector event needs exactly a 'vector' field".into()))
                    }
                    (EventKind::Token, _, _) => {
                        return Err(malformed("token event needs exactly a 'token' field".into()))
                    }
                };
                execs[idx].events.push(TraceEvent { exec_id, step, space_id: space, payload });
            }
        }
    }
    Ok(execs)
}

pub fn parse_trace_str(text: &str) -> Result<Vec<Execution>, TraceError> {
    parse_trace(text.as_bytes())
}

/// Writes executions in the trace format: format tag, then each header
/// followed by its events.
pub fn write_trace<W: Write>(mut out: W, executions: &[Execution]) -> std::io::Result<()> {
    writeln!(out, "{}", serde_json::json!({ "format": TRACE_FORMAT }))?;
    for exec in executions {
        let mut header = Map::new();
        header.insert("type".into(), "exec".into());
        header.insert("exec_id".into(), exec.exec_id.clone().into());
        header.insert("outcome".into(), exec.outcome.as_str().into());
        if !exec.meta.is_empty() {
            header.insert("meta".into(), Value::Object(exec.meta.clone().into_iter().collect()));
        }
        writeln!(out, "{}", Value::Object(header))?;
        for ev in &exec.events {
            let mut rec = Map::new();
            rec.insert("type".into(), "event".into());
            rec.insert("exec_id".into(), ev.exec_id.clone().into());
            rec.insert("step".into(), ev.step.into());
            rec.insert("space".into(), ev.space_id.clone().into());
            match &ev.payload {
                Payload::Vector(v) => {
                    rec.insert("kind".into(), "vector".into());
                    rec.insert("vector".into(), serde_json::to_value(v).map_err(std::io::Error::other)?);
                }
                Payload::Token(t) => {
                    rec.insert("kind".into(), "token".into());
                    rec.insert("token".into(), t.clone().into());
                }
            }
            writeln!(out, "{}", Value::Object(rec))?;
        }
    }
    Ok(())
}

pub fn trace_to_string(executions: &[Execution]) -> String {
    let mut buf = Vec::new();
    write_trace(&mut buf, executions).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    KindMismatch,
    UnknownSpace,
    NonMonotonicStep,
    DimensionMismatch,
    NonFiniteValue,
    EmptyExecution,
    DuplicateExecution,
    ConfigConflict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub exec_id: Option<String>,
    pub step: Option<u64>,
    pub space_id: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }
}

/// Checks every trace invariant. When `configs` is `None` only structural
/// checks run (steps, dimensions, finiteness); otherwise events must also
/// land in a configured space of the matching kind.
pub fn validate(executions: &[Execution], configs: Option<&[SpaceConfig]>) -> ValidationReport {
    let mut violations = Vec::new();
    let cfg_by_id: Option<HashMap<&str, &SpaceConfig>> =
        configs.map(|cs| cs.iter().map(|c| (c.space_id.as_str(), c)).collect());

    if let Some(cs) = configs {
        let mut ids = HashSet::new();
        for c in cs {
            let conflict = |msg: String| Violation {
                kind: ViolationKind::ConfigConflict,
                exec_id: None,
                step: None,
                space_id: Some(c.space_id.clone()),
                message: msg,
            };
            if !ids.insert(c.space_id.as_str()) {
                violations.push(conflict(format!("space '{}' configured twice", c.space_id)));
            }
            if c.role == SpaceRole::Control && c.space_kind != SpaceKind::Discrete {
                violations.push(conflict(format!("control space '{}' must be discrete", c.space_id)));
            }
            if c.projection_dim == Some(0) || c.k == Some(0) {
                violations.push(conflict(format!("space '{}': projection_dim and k must be positive", c.space_id)));
            }
            if c.epsilon.is_some_and(|e| e.is_nan() || e < 0.0) {
                violations.push(conflict(format!("space '{}': epsilon must be non-negative", c.space_id)));
            }
        }
    }

    let mut dims: HashMap<&str, usize> = HashMap::new();
    let mut exec_ids = HashSet::new();
    for exec in executions {
        let at = |kind, step: Option<u64>, space: Option<&str>, message: String| Violation {
            kind,
            exec_id: Some(exec.exec_id.clone()),
            step,
            space_id: space.map(str::to_owned),
            message,
        };
        if !exec_ids.insert(exec.exec_id.as_str()) {
            violations.push(at(ViolationKind::DuplicateExecution, None, None, "duplicate exec_id".into()));
        }
        if exec.events.is_empty() {
            violations.push(at(ViolationKind::EmptyExecution, None, None, "execution has no events".into()));
        }
        let mut prev: Option<u64> = None;
        for ev in &exec.events {
            let space = Some(ev.space_id.as_str());
            if let Some(p) = prev {
                if ev.step <= p {
                    violations.push(at(
                        ViolationKind::NonMonotonicStep,
                        Some(ev.step),
                        space,
                        format!("step {} does not follow step {}", ev.step, p),
                    ));
                }
            }
            prev = Some(prev.map_or(ev.step, |p| p.max(ev.step)));

            if let Some(cfg) = &cfg_by_id {
                match cfg.get(ev.space_id.as_str()) {
                    None => violations.push(at(
                        ViolationKind::UnknownSpace,
                        Some(ev.step),
                        space,
                        format!("space '{}' is not configured", ev.space_id),
                    )),
                    Some(c) if !c.accepts(ev.payload.kind()) => violations.push(at(
                        ViolationKind::KindMismatch,
                        Some(ev.step),
                        space,
                        format!("{} event in {:?} space '{}'", ev.payload.kind(), c.space_kind, ev.space_id),
                    )),
                    Some(_) => {}
                }
            }

            if let Payload::Vector(v) = &ev.payload {
                if v.iter().any(|x| !x.is_finite()) {
                    violations.push(at(
                        ViolationKind::NonFiniteValue,
                        Some(ev.step),
                        space,
                        "non-finite vector entry".into(),
                    ));
                }
                let expected = *dims.entry(ev.space_id.as_str()).or_insert(v.len());
                if expected != v.len() {
                    violations.push(at(
                        ViolationKind::DimensionMismatch,
                        Some(ev.step),
                        space,
                        format!("dimension {} conflicts with earlier dimension {}", v.len(), expected),
                    ));
                }
            }
        }
    }
    ValidationReport { violations }
}
