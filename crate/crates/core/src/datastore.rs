//! Append-only trial logs and offline datasets.
//!
//! Each trial writes `<root>/<trial_id>/log.jsonl`: a header line, one sample
//! line per tick (auxiliary records interleaved), and a footer once the trial
//! has ended. Every line is written with a single `write` call as soon as it
//! is known, so a killed process leaves a log that parses up to its last
//! completed tick.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::algorithms::Transition;
use crate::environment::{self, GridAction};
use crate::orchestrator::{EndReason, FusedReward, TrialConfig};
use crate::protocol::{ActorRef, RewardContribution};

pub const LOG_FILE: &str = "log.jsonl";
pub const DATASET_SCHEMA: &str = "trialmesh.transitions/1";

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("out of order: expected tick {expected}, got {got}")]
    OutOfOrder { expected: u64, got: u64 },
    #[error("stream for trial {0} is closed")]
    StreamClosed(String),
    #[error("trial {0} has not ended")]
    TrialNotEnded(String),
    #[error("unknown trial {0}")]
    UnknownTrial(String),
    #[error("trial {0} already has a log")]
    TrialExists(String),
    #[error("corrupt log at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("bad dataset: {0}")]
    BadDataset(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialHeader {
    pub trial_id: String,
    pub config: TrialConfig,
    pub actors: Vec<ActorRef>,
    pub started_at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub actor_index: usize,
    pub action: GridAction,
    pub substituted: bool,
}

/// Everything that happened in one tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub tick_id: u64,
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<ActionRecord>,
    pub env_rewards: Vec<f64>,
    pub contributions: Vec<RewardContribution>,
    pub fused: Vec<FusedReward>,
    pub next_observations: Vec<Vec<f64>>,
    /// Environment reported done (task complete or its own tick limit).
    pub done: bool,
    /// Every target visited.
    pub terminal: bool,
}

/// Side-channel record, currently only forwarded recommendations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxRecord {
    pub tick_id: u64,
    pub sender: ActorRef,
    pub target_actor: i64,
    pub payload: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialFooter {
    pub end_reason: EndReason,
    pub ticks: u64,
    pub cumulative: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LogLine {
    Header(TrialHeader),
    Sample(Sample),
    Aux(AuxRecord),
    Footer(TrialFooter),
}

fn line_of(record: &LogLine) -> Result<Vec<u8>, DataError> {
    let mut bytes = serde_json::to_vec(record).map_err(|e| DataError::Io(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn trial_dir(root: &Path, trial_id: &str) -> PathBuf {
    root.join(trial_id)
}

pub fn log_path(root: &Path, trial_id: &str) -> PathBuf {
    trial_dir(root, trial_id).join(LOG_FILE)
}

/// Single writer for one trial's log.
#[derive(Debug)]
pub struct TrialStream {
    trial_id: String,
    file: File,
    next_tick: u64,
    closed: bool,
}

impl TrialStream {
    /// Creates the trial directory and writes the header line.
    pub fn create(root: &Path, header: &TrialHeader) -> Result<Self, DataError> {
        let dir = trial_dir(root, &header.trial_id);
        fs::create_dir_all(&dir)?;
        let file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(dir.join(LOG_FILE))
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => DataError::TrialExists(header.trial_id.clone()),
                _ => DataError::from(e),
            })?;
        let mut stream = Self {
            trial_id: header.trial_id.clone(),
            file,
            next_tick: 0,
            closed: false,
        };
        stream.write(&LogLine::Header(header.clone()))?;
        Ok(stream)
    }

    pub fn trial_id(&self) -> &str {
        &self.trial_id
    }

    pub fn samples_written(&self) -> u64 {
        self.next_tick
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    fn write(&mut self, record: &LogLine) -> Result<(), DataError> {
        if self.closed {
            return Err(DataError::StreamClosed(self.trial_id.clone()));
        }
        self.file.write_all(&line_of(record)?)?;
        self.file.flush()?;
        Ok(())
    }

    pub fn append_sample(&mut self, sample: &Sample) -> Result<(), DataError> {
        if self.closed {
            return Err(DataError::StreamClosed(self.trial_id.clone()));
        }
        if sample.tick_id != self.next_tick {
            return Err(DataError::OutOfOrder {
                expected: self.next_tick,
                got: sample.tick_id,
            });
        }
        self.write(&LogLine::Sample(sample.clone()))?;
        self.next_tick += 1;
        Ok(())
    }

    pub fn append_aux(&mut self, aux: &AuxRecord) -> Result<(), DataError> {
        self.write(&LogLine::Aux(aux.clone()))
    }

    /// Writes the footer; the stream rejects further writes.
    pub fn close(&mut self, footer: &TrialFooter) -> Result<(), DataError> {
        self.write(&LogLine::Footer(footer.clone()))?;
        self.file.sync_data()?;
        self.closed = true;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialLog {
    pub header: TrialHeader,
    pub samples: Vec<Sample>,
    pub aux: Vec<AuxRecord>,
    pub footer: Option<TrialFooter>,
    /// A final line without its newline was dropped (writer killed mid-line).
    pub torn_tail: bool,
}

impl TrialLog {
    pub fn ended(&self) -> bool {
        self.footer.is_some()
    }
}

/// Parses log text. Lines must form header, contiguous samples with aux
/// records between them, then at most one footer.
pub fn parse_log(text: &str) -> Result<TrialLog, DataError> {
    let torn_tail = !text.is_empty() && !text.ends_with('\n');
    let mut lines: Vec<&str> = text.split_terminator('\n').collect();
    if torn_tail {
        lines.pop();
    }
    let mut header = None;
    let mut samples: Vec<Sample> = Vec::new();
    let mut aux = Vec::new();
    let mut footer = None;
    for (n, line) in lines.iter().enumerate() {
        let line_no = n + 1;
        let corrupt = |reason: String| DataError::Corrupt {
            line: line_no,
            reason,
        };
        let record: LogLine = serde_json::from_str(line).map_err(|e| corrupt(e.to_string()))?;
        if footer.is_some() {
            return Err(corrupt("record after footer".into()));
        }
        match record {
            LogLine::Header(h) if n == 0 => header = Some(h),
            LogLine::Header(_) => return Err(corrupt("second header".into())),
            _ if n == 0 => return Err(corrupt("log must start with a header".into())),
            LogLine::Sample(s) => {
                if s.tick_id != samples.len() as u64 {
                    return Err(corrupt(format!(
                        "sample tick {} where {} was expected",
                        s.tick_id,
                        samples.len()
                    )));
                }
                samples.push(s);
            }
            LogLine::Aux(a) => aux.push(a),
            LogLine::Footer(f) => {
                if f.ticks != samples.len() as u64 {
                    return Err(corrupt(format!(
                        "footer counts {} ticks, log has {}",
                        f.ticks,
                        samples.len()
                    )));
                }
                footer = Some(f);
            }
        }
    }
    let header = header.ok_or(DataError::Corrupt {
        line: 1,
        reason: "empty log".into(),
    })?;
    Ok(TrialLog {
        header,
        samples,
        aux,
        footer,
        torn_tail,
    })
}

pub fn read_log(root: &Path, trial_id: &str) -> Result<TrialLog, DataError> {
    let path = log_path(root, trial_id);
    if !path.is_file() {
        return Err(DataError::UnknownTrial(trial_id.to_string()));
    }
    parse_log(&fs::read_to_string(path)?)
}

/// Trial ids with a log under `root`, sorted.
pub fn list_trials(root: &Path) -> Result<Vec<String>, DataError> {
    let mut ids = Vec::new();
    if !root.is_dir() {
        return Ok(ids);
    }
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        if entry.path().join(LOG_FILE).is_file() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

/// Flattens one ended log into transitions; rewards are the fused values.
pub fn transitions_of(log: &TrialLog) -> Vec<Transition> {
    log.samples
        .iter()
        .map(|s| Transition {
            x: s.observations.concat(),
            actions: s.actions.iter().map(|a| a.action.index()).collect(),
            rewards: s.fused.iter().map(|f| f.value).collect(),
            x_next: s.next_observations.concat(),
            done: s.terminal,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum DatasetLine {
    Schema {
        schema: String,
        fields: Vec<String>,
    },
    Trial {
        trial_id: String,
        records: usize,
    },
    Transition(Transition),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetTrial {
    pub trial_id: String,
    pub transitions: Vec<Transition>,
}

/// Writes the transitions of `trial_ids`, in the given order, to `out`.
/// Returns the number of transition records.
pub fn export_dataset(root: &Path, trial_ids: &[String], out: &Path) -> Result<usize, DataError> {
    let mut logs = Vec::with_capacity(trial_ids.len());
    for id in trial_ids {
        let log = read_log(root, id)?;
        if !log.ended() {
            return Err(DataError::TrialNotEnded(id.clone()));
        }
        logs.push(log);
    }
    let mut text = Vec::new();
    let schema = DatasetLine::Schema {
        schema: DATASET_SCHEMA.into(),
        fields: ["x", "actions", "rewards", "x_next", "done"]
            .map(String::from)
            .to_vec(),
    };
    let push = |text: &mut Vec<u8>, line: &DatasetLine| -> Result<(), DataError> {
        serde_json::to_writer(&mut *text, line).map_err(|e| DataError::Io(e.to_string()))?;
        text.push(b'\n');
        Ok(())
    };
    push(&mut text, &schema)?;
    let mut count = 0;
    for log in &logs {
        let transitions = transitions_of(log);
        push(
            &mut text,
            &DatasetLine::Trial {
                trial_id: log.header.trial_id.clone(),
                records: transitions.len(),
            },
        )?;
        for t in transitions {
            push(&mut text, &DatasetLine::Transition(t))?;
            count += 1;
        }
    }
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(out, text)?;
    Ok(count)
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetTrial>, DataError> {
    let file = File::open(path).map_err(|e| DataError::BadDataset(format!("{}: {e}", path.display())))?;
    let mut trials: Vec<DatasetTrial> = Vec::new();
    let mut expected: Vec<usize> = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DataError::BadDataset(e.to_string()))?;
        let bad = |reason: String| DataError::BadDataset(format!("line {}: {reason}", n + 1));
        let record: DatasetLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        match (n, record) {
            (0, DatasetLine::Schema { schema, .. }) if schema == DATASET_SCHEMA => {}
            (0, _) => return Err(bad(format!("expected schema {DATASET_SCHEMA}"))),
            (_, DatasetLine::Schema { .. }) => return Err(bad("repeated schema line".into())),
            (_, DatasetLine::Trial { trial_id, records }) => {
                trials.push(DatasetTrial {
                    trial_id,
                    transitions: Vec::with_capacity(records),
                });
                expected.push(records);
            }
            (_, DatasetLine::Transition(t)) => match trials.last_mut() {
                Some(trial) => trial.transitions.push(t),
                None => return Err(bad("transition before any trial marker".into())),
            },
        }
    }
    for (trial, want) in trials.iter().zip(&expected) {
        if trial.transitions.len() != *want {
            return Err(DataError::BadDataset(format!(
                "trial {} declares {want} records, has {}",
                trial.trial_id,
                trial.transitions.len()
            )));
        }
    }
    if expected.is_empty() && trials.is_empty() {
        // a schema-only file is a valid empty dataset
    }
    Ok(trials)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReplayReport {
    Exact { ticks: u64 },
    Divergence { tick: u64, field: String },
}

impl std::fmt::Display for ReplayReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ReplayReport::Exact { .. } => f.write_str("exact"),
            ReplayReport::Divergence { tick, field } => write!(f, "divergence at tick {tick}: {field}"),
        }
    }
}

/// Re-runs the seeded environment with the logged actions and compares
/// observations, environment rewards and done flags tick by tick.
pub fn replay_log(log: &TrialLog) -> Result<ReplayReport, DataError> {
    let config = &log.header.config;
    let n = log.header.actors.len();
    let diverged = |tick: u64, field: &str| {
        Ok(ReplayReport::Divergence {
            tick,
            field: field.to_string(),
        })
    };
    let (mut state, mut obs) = environment::reset(&config.env_spec, n, config.seed)
        .map_err(|e| DataError::Corrupt {
            line: 1,
            reason: e.to_string(),
        })?;
    for s in &log.samples {
        if s.observations != obs {
            return diverged(s.tick_id, "observations");
        }
        let mut actions = vec![GridAction::NOOP; n];
        if s.actions.len() != n {
            return diverged(s.tick_id, "actions");
        }
        for a in &s.actions {
            match actions.get_mut(a.actor_index) {
                Some(slot) => *slot = a.action,
                None => return diverged(s.tick_id, "actions"),
            }
        }
        let out = match environment::step(&config.env_spec, &state, &actions) {
            Ok(out) => out,
            Err(_) => return diverged(s.tick_id, "actions"),
        };
        if out.rewards != s.env_rewards {
            return diverged(s.tick_id, "env_rewards");
        }
        if out.done != s.done || out.state.all_visited() != s.terminal {
            return diverged(s.tick_id, "done");
        }
        state = out.state;
        obs = environment::observe_all(&config.env_spec, &state);
        if s.next_observations != obs {
            return diverged(s.tick_id, "next_observations");
        }
    }
    Ok(ReplayReport::Exact {
        ticks: log.samples.len() as u64,
    })
}

pub fn replay(root: &Path, trial_id: &str) -> Result<ReplayReport, DataError> {
    let log = read_log(root, trial_id)?;
    if !log.ended() {
        return Err(DataError::TrialNotEnded(trial_id.to_string()));
    }
    replay_log(&log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::EnvironmentSpec;

    fn header(id: &str) -> TrialHeader {
        TrialHeader {
            trial_id: id.into(),
            config: TrialConfig {
                n_agents: 1,
                env_spec: EnvironmentSpec {
                    n_targets: 1,
                    ..Default::default()
                },
                ..Default::default()
            },
            actors: vec![ActorRef::agent(0, "a0")],
            started_at_ms: 0,
        }
    }

    fn sample(tick: u64) -> Sample {
        Sample {
            tick_id: tick,
            observations: vec![vec![0.25]],
            actions: vec![ActionRecord {
                actor_index: 0,
                action: GridAction::North,
                substituted: false,
            }],
            env_rewards: vec![-0.01],
            contributions: vec![],
            fused: vec![FusedReward {
                target_actor: 0,
                tick_id: tick,
                value: -0.01,
                n_sources: 1,
                no_signal: false,
            }],
            next_observations: vec![vec![0.5]],
            done: false,
            terminal: false,
        }
    }

    fn footer(ticks: u64) -> TrialFooter {
        TrialFooter {
            end_reason: EndReason::MaxTicks,
            ticks,
            cumulative: vec![-0.01 * ticks as f64],
        }
    }

    #[test]
    fn three_ticks_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = TrialStream::create(dir.path(), &header("t")).unwrap();
        for t in 0..3 {
            s.append_sample(&sample(t)).unwrap();
        }
        let log = read_log(dir.path(), "t").unwrap();
        assert_eq!(log.samples.len(), 3);
        assert_eq!(log.samples.iter().map(|s| s.tick_id).collect::<Vec<_>>(), [0, 1, 2]);
        assert!(!log.ended());
        let text = fs::read_to_string(log_path(dir.path(), "t")).unwrap();
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn gap_is_out_of_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = TrialStream::create(dir.path(), &header("t")).unwrap();
        for t in 0..4 {
            s.append_sample(&sample(t)).unwrap();
        }
        assert_eq!(
            s.append_sample(&sample(5)).unwrap_err(),
            DataError::OutOfOrder {
                expected: 4,
                got: 5
            }
        );
    }

    #[test]
    fn closed_stream_rejects_writes() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = TrialStream::create(dir.path(), &header("t")).unwrap();
        s.append_sample(&sample(0)).unwrap();
        s.close(&footer(1)).unwrap();
        assert!(matches!(s.append_sample(&sample(1)), Err(DataError::StreamClosed(_))));
        assert!(read_log(dir.path(), "t").unwrap().ended());
    }

    #[test]
    fn second_stream_for_same_trial_refused() {
        let dir = tempfile::tempdir().unwrap();
        TrialStream::create(dir.path(), &header("t")).unwrap();
        assert!(matches!(
            TrialStream::create(dir.path(), &header("t")),
            Err(DataError::TrialExists(_))
        ));
    }

    #[test]
    fn torn_last_line_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = TrialStream::create(dir.path(), &header("t")).unwrap();
        s.append_sample(&sample(0)).unwrap();
        drop(s);
        let path = log_path(dir.path(), "t");
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("{\"kind\":\"sample\",\"tick_");
        let log = parse_log(&text).unwrap();
        assert!(log.torn_tail);
        assert_eq!(log.samples.len(), 1);
    }

    #[test]
    fn footer_must_match_sample_count() {
        let h = serde_json::to_string(&LogLine::Header(header("t"))).unwrap();
        let f = serde_json::to_string(&LogLine::Footer(footer(2))).unwrap();
        assert!(matches!(parse_log(&format!("{h}\n{f}\n")), Err(DataError::Corrupt { line: 2, .. })));
    }

    #[test]
    fn unknown_and_unended_trials() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("d.jsonl");
        assert!(matches!(
            export_dataset(dir.path(), &["nope".into()], &out),
            Err(DataError::UnknownTrial(_))
        ));
        TrialStream::create(dir.path(), &header("open")).unwrap();
        assert!(matches!(
            export_dataset(dir.path(), &["open".into()], &out),
            Err(DataError::TrialNotEnded(_))
        ));
    }

    #[test]
    fn export_keeps_boundaries_and_order() {
        let dir = tempfile::tempdir().unwrap();
        for (id, n) in [("a", 2u64), ("b", 3)] {
            let mut s = TrialStream::create(dir.path(), &header(id)).unwrap();
            for t in 0..n {
                s.append_sample(&sample(t)).unwrap();
            }
            s.close(&footer(n)).unwrap();
        }
        let out = dir.path().join("set.jsonl");
        let n = export_dataset(dir.path(), &["b".into(), "a".into()], &out).unwrap();
        assert_eq!(n, 5);
        let text = fs::read_to_string(&out).unwrap();
        assert!(text.lines().next().unwrap().contains(DATASET_SCHEMA));
        let trials = read_dataset(&out).unwrap();
        assert_eq!(trials.len(), 2);
        assert_eq!(trials[0].trial_id, "b");
        assert_eq!(trials[0].transitions.len(), 3);
        assert_eq!(trials[1].transitions.len(), 2);
        assert_eq!(trials[1].transitions[0].x, vec![0.25]);
        assert_eq!(trials[1].transitions[0].rewards, vec![-0.01]);
    }

    #[test]
    fn dataset_without_schema_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        fs::write(&p, "{\"kind\":\"trial\",\"trial_id\":\"a\",\"records\":0}\n").unwrap();
        assert!(matches!(read_dataset(&p), Err(DataError::BadDataset(_))));
    }

    #[test]
    fn zero_tick_trial_replays_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = TrialStream::create(dir.path(), &header("z")).unwrap();
        s.close(&footer(0)).unwrap();
        assert_eq!(replay(dir.path(), "z").unwrap(), ReplayReport::Exact { ticks: 0 });
    }
}
