//! Training logs: decisions at inference time, rewards later, joined by event id.
//!
//! Both logs are JSONL. A decision line carries the full context so the log
//! is self-contained for off-policy work.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::feature::{Context, FeatureKey, FeatureValue, ValueKind};

#[derive(Debug, Error)]
pub enum LogError {
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("decision {0} has non-positive propensity")]
    ZeroPropensity(String),
    #[error("reward for {0} is not finite")]
    NonFiniteReward(String),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
}

impl LogError {
    fn io(path: impl AsRef<Path>, source: io::Error) -> Self {
        LogError::IoFailure {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRecord {
    pub event_id: String,
    pub timestamp: i64,
    pub model_id: String,
    pub context: Context,
    pub action_index: usize,
    pub action_label: String,
    pub probability: f64,
}

impl DecisionRecord {
    pub fn validate(&self) -> Result<(), LogError> {
        if !(self.probability > 0.0 && self.probability <= 1.0) {
            return Err(LogError::ZeroPropensity(self.event_id.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RewardRecord {
    pub event_id: String,
    pub reward: f64,
}

impl RewardRecord {
    pub fn validate(&self) -> Result<(), LogError> {
        if !self.reward.is_finite() {
            return Err(LogError::NonFiniteReward(self.event_id.clone()));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct DecisionLine {
    event_id: String,
    ts: i64,
    model_id: String,
    context: Vec<ContextEntry>,
    action: usize,
    label: String,
    prob: f64,
}

#[derive(Serialize, Deserialize)]
struct ContextEntry {
    ns: String,
    name: String,
    kind: String,
    value: Value,
}

/// JSON array form of a context, as used in decision lines and on the CLI.
pub fn context_to_json(context: &Context) -> Value {
    serde_json::to_value(context_entries(context)).expect("context serializes")
}

fn context_entries(context: &Context) -> Vec<ContextEntry> {
    context
        .features()
        .iter()
        .map(|(k, v)| ContextEntry {
            ns: k.namespace().to_owned(),
            name: k.name().to_owned(),
            kind: v.kind().as_str().to_owned(),
            value: match v {
                FeatureValue::Bool(b) => Value::from(*b),
                FeatureValue::Int(i) => Value::from(*i),
                FeatureValue::Real(r) => Value::from(*r),
                FeatureValue::Categorical(s) => Value::from(s.as_str()),
            },
        })
        .collect()
}

/// Parse the JSON array form of a context.
pub fn context_from_json(value: &Value) -> Result<Context, String> {
    let entries: Vec<ContextEntry> =
        serde_json::from_value(value.clone()).map_err(|e| e.to_string())?;
    context_from_entries(entries)
}

fn context_from_entries(entries: Vec<ContextEntry>) -> Result<Context, String> {
    let mut features = Vec::with_capacity(entries.len());
    for e in entries {
        let key = FeatureKey::new(e.ns, e.name).map_err(|err| err.to_string())?;
        let kind = ValueKind::parse(&e.kind).ok_or_else(|| format!("unknown kind {:?}", e.kind))?;
        let value = match (kind, &e.value) {
            (ValueKind::Bool, Value::Bool(b)) => FeatureValue::Bool(*b),
            (ValueKind::Int, Value::Number(n)) if n.is_i64() => {
                FeatureValue::Int(n.as_i64().unwrap_or_default())
            }
            (ValueKind::Real, Value::Number(n)) => {
                FeatureValue::Real(n.as_f64().ok_or_else(|| format!("bad real for {key}"))?)
            }
            (ValueKind::Categorical, Value::String(s)) => FeatureValue::Categorical(s.clone()),
            (kind, v) => return Err(format!("value {v} does not match kind {kind} for {key}")),
        };
        features.push((key, value));
    }
    Context::new(features).map_err(|e| e.to_string())
}

pub fn decision_to_line(record: &DecisionRecord) -> String {
    let line = DecisionLine {
        event_id: record.event_id.clone(),
        ts: record.timestamp,
        model_id: record.model_id.clone(),
        context: context_entries(&record.context),
        action: record.action_index,
        label: record.action_label.clone(),
        prob: record.probability,
    };
    serde_json::to_string(&line).expect("decision serializes")
}

pub fn decision_from_line(line: &str) -> Result<DecisionRecord, String> {
    let raw: DecisionLine = serde_json::from_str(line).map_err(|e| e.to_string())?;
    Ok(DecisionRecord {
        event_id: raw.event_id,
        timestamp: raw.ts,
        model_id: raw.model_id,
        context: context_from_entries(raw.context)?,
        action_index: raw.action,
        action_label: raw.label,
        probability: raw.prob,
    })
}

pub fn reward_to_line(record: &RewardRecord) -> String {
    serde_json::to_string(record).expect("reward serializes")
}

/// Destination for training logs. Records are validated before they are appended.
pub trait LogSink {
    fn append_decision(&mut self, record: &DecisionRecord) -> Result<(), LogError>;
    fn append_reward(&mut self, record: &RewardRecord) -> Result<(), LogError>;
}

/// In-memory sink, used by the simulator.
#[derive(Debug, Default, Clone)]
pub struct MemoryLog {
    pub decisions: Vec<DecisionRecord>,
    pub rewards: Vec<RewardRecord>,
}

impl LogSink for MemoryLog {
    fn append_decision(&mut self, record: &DecisionRecord) -> Result<(), LogError> {
        record.validate()?;
        self.decisions.push(record.clone());
        Ok(())
    }

    fn append_reward(&mut self, record: &RewardRecord) -> Result<(), LogError> {
        record.validate()?;
        self.rewards.push(record.clone());
        Ok(())
    }
}

/// Writes JSONL lines to any pair of writers, flushing after each record.
pub struct JsonlSink<D: Write, R: Write> {
    decisions: D,
    rewards: R,
    labels: (String, String),
}

impl JsonlSink<BufWriter<File>, BufWriter<File>> {
    /// Open (append mode, creating if needed) a decision and a reward file.
    pub fn open(decisions: &Path, rewards: &Path) -> Result<Self, LogError> {
        let open = |p: &Path| {
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map(BufWriter::new)
                .map_err(|e| LogError::io(p, e))
        };
        Ok(Self {
            decisions: open(decisions)?,
            rewards: open(rewards)?,
            labels: (
                decisions.display().to_string(),
                rewards.display().to_string(),
            ),
        })
    }
}

impl<D: Write, R: Write> JsonlSink<D, R> {
    pub fn new(decisions: D, rewards: R) -> Self {
        Self {
            decisions,
            rewards,
            labels: ("decisions".into(), "rewards".into()),
        }
    }

    pub fn into_inner(self) -> (D, R) {
        (self.decisions, self.rewards)
    }
}

fn write_line(w: &mut impl Write, line: &str) -> io::Result<()> {
    w.write_all(line.as_bytes())?;
    w.write_all(b"\n")?;
    w.flush()
}

impl<D: Write, R: Write> LogSink for JsonlSink<D, R> {
    fn append_decision(&mut self, record: &DecisionRecord) -> Result<(), LogError> {
        record.validate()?;
        write_line(&mut self.decisions, &decision_to_line(record))
            .map_err(|e| LogError::io(&self.labels.0, e))
    }

    fn append_reward(&mut self, record: &RewardRecord) -> Result<(), LogError> {
        record.validate()?;
        write_line(&mut self.rewards, &reward_to_line(record))
            .map_err(|e| LogError::io(&self.labels.1, e))
    }
}

fn read_lines<T>(
    reader: impl BufRead,
    label: &str,
    parse: impl Fn(&str) -> Result<T, String>,
    check: impl Fn(&T) -> Result<(), LogError>,
) -> Result<Vec<T>, LogError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| LogError::io(label, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse(&line).map_err(|message| LogError::Malformed {
            line: i + 1,
            message,
        })?;
        check(&record)?;
        out.push(record);
    }
    Ok(out)
}

pub fn read_decisions(reader: impl BufRead) -> Result<Vec<DecisionRecord>, LogError> {
    read_lines(
        reader,
        "decisions",
        decision_from_line,
        DecisionRecord::validate,
    )
}

pub fn read_rewards(reader: impl BufRead) -> Result<Vec<RewardRecord>, LogError> {
    read_lines(
        reader,
        "rewards",
        |l| serde_json::from_str::<RewardRecord>(l).map_err(|e| e.to_string()),
        RewardRecord::validate,
    )
}

pub fn read_decisions_file(path: &Path) -> Result<Vec<DecisionRecord>, LogError> {
    let f = File::open(path).map_err(|e| LogError::io(path, e))?;
    read_decisions(BufReader::new(f))
}

pub fn read_rewards_file(path: &Path) -> Result<Vec<RewardRecord>, LogError> {
    let f = File::open(path).map_err(|e| LogError::io(path, e))?;
    read_rewards(BufReader::new(f))
}

/// Write complete logs to two files, truncating them first.
pub fn write_log_files(
    decisions: &[DecisionRecord],
    rewards: &[RewardRecord],
    decisions_path: &Path,
    rewards_path: &Path,
) -> Result<(), LogError> {
    let mut d =
        BufWriter::new(File::create(decisions_path).map_err(|e| LogError::io(decisions_path, e))?);
    for r in decisions {
        r.validate()?;
        writeln!(d, "{}", decision_to_line(r)).map_err(|e| LogError::io(decisions_path, e))?;
    }
    d.flush().map_err(|e| LogError::io(decisions_path, e))?;
    let mut w =
        BufWriter::new(File::create(rewards_path).map_err(|e| LogError::io(rewards_path, e))?);
    for r in rewards {
        r.validate()?;
        writeln!(w, "{}", reward_to_line(r)).map_err(|e| LogError::io(rewards_path, e))?;
    }
    w.flush().map_err(|e| LogError::io(rewards_path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct JoinedExample {
    pub context: Context,
    pub action_index: usize,
    pub probability: f64,
    pub reward: f64,
    pub reward_was_default: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct JoinDiagnostics {
    pub matched: usize,
    pub defaulted: usize,
    pub duplicate_rewards: usize,
    pub orphan_rewards: usize,
}

/// One example per decision; the first reward for an event id wins.
pub fn join_logs(
    decisions: &[DecisionRecord],
    rewards: &[RewardRecord],
    default_reward: f64,
) -> (Vec<JoinedExample>, JoinDiagnostics) {
    let mut diag = JoinDiagnostics::default();
    let mut first: HashMap<&str, f64> = HashMap::with_capacity(rewards.len());
    for r in rewards {
        if first.contains_key(r.event_id.as_str()) {
            diag.duplicate_rewards += 1;
        } else {
            first.insert(&r.event_id, r.reward);
        }
    }
    let examples = decisions
        .iter()
        .map(|d| {
            let found = first.get(d.event_id.as_str()).copied();
            match found {
                Some(_) => diag.matched += 1,
                None => diag.defaulted += 1,
            }
            JoinedExample {
                context: d.context.clone(),
                action_index: d.action_index,
                probability: d.probability,
                reward: found.unwrap_or(default_reward),
                reward_was_default: found.is_none(),
            }
        })
        .collect();
    let known: HashSet<&str> = decisions.iter().map(|d| d.event_id.as_str()).collect();
    diag.orphan_rewards = rewards
        .iter()
        .filter(|r| !known.contains(r.event_id.as_str()))
        .count();
    (examples, diag)
}

/// Generates `<runId>-<counter>` event ids.
#[derive(Debug, Clone)]
pub struct EventIds {
    run_id: String,
    next: u64,
}

impl EventIds {
    pub fn new(run_id: impl Into<String>) -> Self {
        Self {
            run_id: run_id.into(),
            next: 0,
        }
    }
}

impl Iterator for EventIds {
    type Item = String;

    fn next(&mut self) -> Option<String> {
        let id = format!("{}-{}", self.run_id, self.next);
        self.next += 1;
        Some(id)
    }
}
