//! Append-only JSON-lines event log.
//!
//! Every answer and every derived decision is appended here before it takes
//! effect; all run artifacts are folds over the log. A run can be resumed by
//! replaying the existing records through a [`Recorder`], which checks that
//! the re-executed pipeline emits exactly the logged events before it starts
//! appending new ones.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consolidation::{Label, PairId};
use crate::engine::{Phase, TaskAnswer, TaskKind};
use crate::model::Stance;
use crate::sampling::AnnotationAction;
use crate::selection::SelectionMethod;

/// Input events carry annotator requests and answers; the remaining
/// (derived) events record what the engine concluded from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    RunStarted {
        run_id: String,
        corpus_id: String,
    },
    PhaseStarted {
        phase: Phase,
    },
    SessionCreated {
        session_id: String,
        annotator_id: String,
    },
    OpinionServed {
        session_id: String,
        opinion_id: String,
    },
    ActionRecorded {
        session_id: String,
        opinion_id: String,
        action: AnnotationAction,
        /// Stance suggested to the annotator (the opinion's label).
        suggested_stance: Stance,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        argument_id: Option<String>,
    },
    TaskServed {
        task_id: String,
        kind: TaskKind,
        annotator_id: String,
    },
    TaskAnswered {
        task_id: String,
        annotator_id: String,
        answer: TaskAnswer,
    },
    TopicVectorAssigned {
        argument_id: String,
        counts: Vec<u32>,
    },
    VotesRecorded {
        pair: PairId,
        votes: Vec<bool>,
        label: Label,
    },
    LabelPropagated {
        label: Label,
        pairs: Vec<PairId>,
    },
    ClusterComputed {
        method: String,
        param: f64,
        error: f64,
        clusters: Vec<Vec<String>>,
    },
    RepresentativeChosen {
        cluster_id: usize,
        method: SelectionMethod,
        text: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        source_argument_id: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        score: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fallback: Option<String>,
    },
    MatchJudged {
        opinion_id: String,
        method: String,
        key_argument: String,
        votes: Vec<bool>,
        z: bool,
    },
    ReportEmitted {
        name: String,
    },
}

impl Event {
    pub fn kind(&self) -> &'static str {
        match self {
            Event::RunStarted { .. } => "run_started",
            Event::PhaseStarted { .. } => "phase_started",
            Event::SessionCreated { .. } => "session_created",
            Event::OpinionServed { .. } => "opinion_served",
            Event::ActionRecorded { .. } => "action_recorded",
            Event::TaskServed { .. } => "task_served",
            Event::TaskAnswered { .. } => "task_answered",
            Event::TopicVectorAssigned { .. } => "topic_vector_assigned",
            Event::VotesRecorded { .. } => "votes_recorded",
            Event::LabelPropagated { .. } => "label_propagated",
            Event::ClusterComputed { .. } => "cluster_computed",
            Event::RepresentativeChosen { .. } => "representative_chosen",
            Event::MatchJudged { .. } => "match_judged",
            Event::ReportEmitted { .. } => "report_emitted",
        }
    }

    /// Whether the event carries outside input rather than a derived result.
    pub fn is_input(&self) -> bool {
        matches!(
            self,
            Event::SessionCreated { .. }
                | Event::OpinionServed { .. }
                | Event::ActionRecorded { .. }
                | Event::TaskServed { .. }
                | Event::TaskAnswered { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub ts: u64,
    #[serde(flatten)]
    pub event: Event,
}

/// Source of record timestamps. Simulated runs use the logical clock so the
/// log itself is byte-reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clock {
    Logical,
    System,
}

impl Clock {
    pub fn now(self, seq: u64) -> u64 {
        match self {
            Clock::Logical => seq,
            Clock::System => now_ms(),
        }
    }
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("event log {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("event log {path}:{line}: {source}")]
    Corrupt { path: String, line: usize, source: serde_json::Error },
    #[error("replay diverged at seq {seq}: logged {logged}, re-executed {replayed}")]
    Divergence { seq: u64, logged: String, replayed: String },
    #[error("halted after {0} events")]
    Halted(usize),
}

/// Single-writer append-only log, optionally backed by a file.
#[derive(Debug)]
pub struct EventLog {
    path: Option<PathBuf>,
    file: Option<File>,
    records: Vec<EventRecord>,
    clock: Clock,
}

impl EventLog {
    pub fn in_memory(clock: Clock) -> Self {
        Self { path: None, file: None, records: Vec::new(), clock }
    }

    /// In-memory log preloaded with records, for read-only replays.
    pub fn from_records(records: Vec<EventRecord>, clock: Clock) -> Self {
        Self { path: None, file: None, records, clock }
    }

    /// Opens (or creates) a log file and loads its records. A torn final line
    /// left by a crash mid-append is truncated away.
    pub fn open(path: &Path, clock: Clock) -> Result<Self, LogError> {
        let io_err = |source| LogError::Io { path: path.display().to_string(), source };
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)
            .map_err(io_err)?;
        let mut records = Vec::new();
        let mut good_len = 0u64;
        {
            let mut reader = BufReader::new(&file);
            let mut line = String::new();
            let mut lineno = 0;
            loop {
                line.clear();
                let n = reader.read_line(&mut line).map_err(io_err)?;
                if n == 0 {
                    break;
                }
                lineno += 1;
                if !line.ends_with('\n') {
                    break;
                }
                match serde_json::from_str::<EventRecord>(line.trim_end()) {
                    Ok(rec) => {
                        records.push(rec);
                        good_len += n as u64;
                    }
                    Err(source) => {
                        // only the final line may be torn
                        let mut rest = String::new();
                        reader.read_line(&mut rest).map_err(io_err)?;
                        if rest.is_empty() {
                            break;
                        }
                        return Err(LogError::Corrupt { path: path.display().to_string(), line: lineno, source });
                    }
                }
            }
        }
        if file.metadata().map_err(io_err)?.len() != good_len {
            file.set_len(good_len).map_err(io_err)?;
            file.seek(SeekFrom::End(0)).map_err(io_err)?;
        }
        Ok(Self { path: Some(path.to_path_buf()), file: Some(file), records, clock })
    }

    pub fn read(path: &Path) -> Result<Vec<EventRecord>, LogError> {
        let io_err = |source| LogError::Io { path: path.display().to_string(), source };
        let reader = BufReader::new(File::open(path).map_err(io_err)?);
        let mut out = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(io_err)?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(
                serde_json::from_str(&line)
                    .map_err(|source| LogError::Corrupt { path: path.display().to_string(), line: i + 1, source })?,
            );
        }
        Ok(out)
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn clock(&self) -> Clock {
        self.clock
    }

    pub fn append(&mut self, event: Event) -> Result<&EventRecord, LogError> {
        self.append_at(event, None)
    }

    /// Appends with an explicit wall-clock timestamp; the logical clock
    /// always stamps the sequence number.
    pub fn append_at(&mut self, event: Event, ts: Option<u64>) -> Result<&EventRecord, LogError> {
        let seq = self.records.len() as u64;
        let ts = match self.clock {
            Clock::Logical => seq,
            Clock::System => ts.unwrap_or_else(now_ms),
        };
        let record = EventRecord { seq, ts, event };
        if let Some(file) = self.file.as_mut() {
            let path = self.path.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
            let mut line = serde_json::to_vec(&record).expect("event serializes");
            line.push(b'\n');
            file.write_all(&line)
                .and_then(|_| file.flush())
                .map_err(|source| LogError::Io { path, source })?;
        }
        self.records.push(record);
        Ok(self.records.last().expect("just pushed"))
    }
}

/// Wraps a log for deterministic re-execution: while earlier records remain,
/// each emitted event must equal the logged one; afterwards events are
/// appended.
#[derive(Debug)]
pub struct Recorder {
    log: EventLog,
    cursor: usize,
    halt_after: Option<usize>,
    op_ts: Option<u64>,
}

impl Recorder {
    pub fn new(log: EventLog) -> Self {
        Self { log, cursor: 0, halt_after: None, op_ts: None }
    }

    /// Starts an operation and returns its timestamp: the logged one while
    /// replaying, the clock otherwise. Events recorded until the next call
    /// share it.
    pub fn begin(&mut self) -> u64 {
        let ts = match self.peek() {
            Some(rec) => rec.ts,
            None => self.log.clock().now(self.log.len() as u64),
        };
        self.op_ts = Some(ts);
        ts
    }

    /// Next logged record still to be replayed.
    pub fn peek(&self) -> Option<&EventRecord> {
        self.log.records().get(self.cursor)
    }

    /// Logged records not yet replayed.
    pub fn pending(&self) -> &[EventRecord] {
        &self.log.records()[self.cursor.min(self.log.len())..]
    }

    /// Stop with [`LogError::Halted`] once the log holds `n` records; used to
    /// exercise crash recovery.
    pub fn halt_after(mut self, n: Option<usize>) -> Self {
        self.halt_after = n;
        self
    }

    pub fn replaying(&self) -> bool {
        self.cursor < self.log.len()
    }

    pub fn record(&mut self, event: Event) -> Result<(), LogError> {
        if self.cursor < self.log.len() {
            let logged = &self.log.records()[self.cursor];
            if logged.event != event {
                return Err(LogError::Divergence {
                    seq: logged.seq,
                    logged: serde_json::to_string(&logged.event).unwrap_or_default(),
                    replayed: serde_json::to_string(&event).unwrap_or_default(),
                });
            }
            self.cursor += 1;
            return Ok(());
        }
        if let Some(n) = self.halt_after {
            if self.log.len() >= n {
                return Err(LogError::Halted(n));
            }
        }
        self.log.append_at(event, self.op_ts)?;
        self.cursor += 1;
        Ok(())
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn into_log(self) -> EventLog {
        self.log
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn served(i: usize) -> Event {
        Event::OpinionServed { session_id: "s".into(), opinion_id: format!("o{i}") }
    }

    #[test]
    fn file_roundtrip_and_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        {
            let mut log = EventLog::open(&path, Clock::Logical).unwrap();
            for i in 0..3 {
                log.append(served(i)).unwrap();
            }
        }
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(b"{\"seq\":3,\"ts\":3,\"ty");
        std::fs::write(&path, &bytes).unwrap();

        let mut log = EventLog::open(&path, Clock::Logical).unwrap();
        assert_eq!(log.len(), 3);
        log.append(served(3)).unwrap();
        let back = EventLog::read(&path).unwrap();
        assert_eq!(back.len(), 4);
        assert_eq!(back[3].seq, 3);
        assert_eq!(back[3].event, served(3));
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        std::fs::write(&path, "garbage\n{\"seq\":0,\"ts\":0,\"type\":\"phase_started\",\"phase\":\"x\"}\n").unwrap();
        assert!(matches!(EventLog::open(&path, Clock::Logical), Err(LogError::Corrupt { line: 1, .. })));
    }

    #[test]
    fn recorder_replays_then_appends() {
        let mut log = EventLog::in_memory(Clock::Logical);
        log.append(served(0)).unwrap();
        let mut rec = Recorder::new(log);
        assert!(rec.replaying());
        rec.record(served(0)).unwrap();
        assert!(!rec.replaying());
        rec.record(served(1)).unwrap();
        assert_eq!(rec.log().len(), 2);

        let mut log = EventLog::in_memory(Clock::Logical);
        log.append(served(0)).unwrap();
        let mut rec = Recorder::new(log);
        assert!(matches!(rec.record(served(5)), Err(LogError::Divergence { seq: 0, .. })));
    }

    #[test]
    fn op_timestamp_replays() {
        let mut log = EventLog::in_memory(Clock::System);
        log.append_at(served(0), Some(1234)).unwrap();
        let mut rec = Recorder::new(log);
        assert_eq!(rec.begin(), 1234);
        rec.record(served(0)).unwrap();
        let ts = rec.begin();
        rec.record(served(1)).unwrap();
        rec.record(served(2)).unwrap();
        assert_eq!(rec.log().records()[1].ts, ts);
        assert_eq!(rec.log().records()[2].ts, ts);

        let mut rec = Recorder::new(EventLog::in_memory(Clock::Logical));
        assert_eq!(rec.begin(), 0);
        rec.record(served(0)).unwrap();
        assert_eq!(rec.begin(), 1);
    }

    #[test]
    fn recorder_halts() {
        let mut rec = Recorder::new(EventLog::in_memory(Clock::Logical)).halt_after(Some(2));
        rec.record(served(0)).unwrap();
        rec.record(served(1)).unwrap();
        assert!(matches!(rec.record(served(2)), Err(LogError::Halted(2))));
    }
}
