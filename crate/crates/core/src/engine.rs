//! Event-sourced run state machine shared by the simulator and the HTTP
//! service.
//!
//! Annotators pull work (`next_opinion`, `next_task`) and push answers
//! (`submit_action`, `answer_task`). Each request is appended to the event
//! log before it changes state, followed by whatever the engine derives from
//! it. Reopening a log re-issues the logged requests in order; the recorder
//! checks that every derived event comes out identical.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::{automated_baseline, BaselineResult};
use crate::clustering::{
    default_louvain_grid, label_lookup, sweep_select, ClusterError, SimilarityGraph, SweepResult,
};
use crate::consolidation::{
    score_all_pairs, ConsolidationError, ConsolidationStats, Label, MultiPathScheduler, PairId, PairRecord,
};
use crate::evaluation::{EvalReport, MatchRecord};
use crate::eventlog::{Event, EventLog, LogError, Recorder};
use crate::model::{EmbeddingError, EmbeddingStore, KeyArgument, Opinion, Stance, TopicProfile, TopicVector};
use crate::sampling::{
    aggregate_topic_vectors, next_opinion, shortlist_topics, AnnotationAction, SamplerConfig, SamplingError,
    SessionState,
};
use crate::selection::{
    guard_threshold, select_centroid, select_quality, select_random, PromptTemplate, PromptedSelector,
    Representative, SelectionError, SelectionMethod, SelectionScorer, SynthesisClient, TokenRecallScorer,
};
use crate::util::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Phase1,
    Topics,
    Consolidation,
    Matching,
    Done,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Phase1 => "phase1",
            Phase::Topics => "topics",
            Phase::Consolidation => "consolidation",
            Phase::Matching => "matching",
            Phase::Done => "done",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Phase1Opinion,
    TopicAssign,
    PairSimilarity,
    MatchEval,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskAnswer {
    Topics(Vec<bool>),
    Similar(bool),
    Match(bool),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArgumentView {
    pub id: String,
    pub text: String,
    pub stance: Stance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicView {
    pub topic_id: String,
    pub top_words: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub labeled: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum TaskPayload {
    Phase1Opinion {
        session_id: String,
        opinion_id: String,
        text: String,
        suggested_stance: Stance,
        /// The session's own arguments, for "already in my list".
        arguments: Vec<ArgumentView>,
        served: usize,
        session_length: usize,
    },
    TopicAssign {
        argument_id: String,
        text: String,
        topics: Vec<TopicView>,
    },
    PairSimilarity {
        pair: PairId,
        first: ArgumentView,
        second: ArgumentView,
        progress: Progress,
    },
    MatchEval {
        opinion_id: String,
        opinion_text: String,
        key_argument: String,
        /// Items the key argument stands for.
        sources: Vec<String>,
    },
}

impl TaskPayload {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskPayload::Phase1Opinion { .. } => TaskKind::Phase1Opinion,
            TaskPayload::TopicAssign { .. } => TaskKind::TopicAssign,
            TaskPayload::PairSimilarity { .. } => TaskKind::PairSimilarity,
            TaskPayload::MatchEval { .. } => TaskKind::MatchEval,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEnvelope {
    pub task_id: String,
    #[serde(flatten)]
    pub payload: TaskPayload,
    pub deadline_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub run_id: String,
    pub corpus_id: String,
    pub sampler: SamplerConfig,
    /// Phase 1 sessions to complete before moving on.
    pub annotators: usize,
    pub topic_votes: usize,
    pub max_topics: usize,
    pub similarity_votes: usize,
    pub match_votes: usize,
    pub lease_ms: u64,
    pub louvain_grid: Vec<f64>,
    pub spectral_max_k: usize,
    pub cluster_seed: u64,
    pub selection: SelectionMethod,
    pub selection_seed: u64,
    pub prompt_template: PromptTemplate,
    pub match_sample: usize,
    pub baseline_threshold: f64,
    pub triples: usize,
    pub eval_seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            corpus_id: String::new(),
            sampler: SamplerConfig::default(),
            annotators: 5,
            topic_votes: 3,
            max_topics: 15,
            similarity_votes: 3,
            match_votes: 7,
            lease_ms: 600_000,
            louvain_grid: default_louvain_grid(),
            spectral_max_k: 40,
            cluster_seed: 0,
            selection: SelectionMethod::Centroid,
            selection_seed: 0,
            prompt_template: PromptTemplate::Instruction,
            match_sample: 100,
            baseline_threshold: 0.6,
            triples: 300,
            eval_seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::InvalidConfig(m.to_string()));
        if self.run_id.is_empty() || self.corpus_id.is_empty() {
            return bad("run_id and corpus_id are required");
        }
        if self.annotators == 0 {
            return bad("annotators must be positive");
        }
        if self.sampler.session_length == 0 || self.sampler.pool_size == 0 {
            return bad("session length and pool size must be positive");
        }
        if self.similarity_votes.is_multiple_of(2) || self.match_votes.is_multiple_of(2) {
            return bad("vote counts must be odd");
        }
        if self.louvain_grid.iter().any(|r| !r.is_finite() || *r <= 0.0) {
            return bad("louvain resolutions must be positive");
        }
        if self.louvain_grid.is_empty() && self.spectral_max_k < 2 {
            return bad("clustering grid is empty");
        }
        if !(-1.0..=1.0).contains(&self.baseline_threshold) {
            return bad("baseline threshold must be a cosine in [-1, 1]");
        }
        Ok(())
    }

    pub fn spectral_grid(&self, n: usize) -> Vec<usize> {
        (2..=n.min(self.spectral_max_k)).collect()
    }
}

/// Everything the engine reads besides annotator input.
#[derive(Debug, Clone, Default)]
pub struct RunInputs {
    pub opinions: Vec<Opinion>,
    pub embeddings: EmbeddingStore,
    pub quality: HashMap<String, f64>,
    pub topics: Vec<TopicProfile>,
}

/// Supplies vectors for new key arguments. Returning `None` makes the engine
/// use the source opinion's vector.
pub trait ArgumentEmbedder: Send + Sync {
    fn embed(&self, argument: &KeyArgument) -> Option<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SourceOpinionEmbedder;

impl ArgumentEmbedder for SourceOpinionEmbedder {
    fn embed(&self, _: &KeyArgument) -> Option<Vec<f64>> {
        None
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("input: {0}")]
    Input(String),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Consolidation(#[from] ConsolidationError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("no session for annotator {0}")]
    NoSession(String),
    #[error("all {0} sessions are taken")]
    SessionLimit(usize),
    #[error("run is in phase {actual}, not {expected}")]
    WrongPhase { expected: &'static str, actual: &'static str },
    #[error("task {task} was not served to {annotator}")]
    NotServed { task: String, annotator: String },
    #[error("task {task} already answered by {annotator}")]
    AlreadyAnswered { task: String, annotator: String },
    #[error("task {0} is already resolved")]
    Stale(String),
    #[error("bad answer: {0}")]
    BadAnswer(String),
    #[error("log record {seq} ({kind}) is not an input event")]
    UnexpectedEvent { seq: u64, kind: &'static str },
}

#[derive(Debug, Clone)]
struct Slot {
    key: String,
    needed: usize,
    answers: Vec<(String, TaskAnswer)>,
    leases: BTreeMap<String, u64>,
    served: BTreeSet<String>,
    closed: bool,
}

/// Per-kind FIFO of tasks, each needing answers from distinct annotators.
#[derive(Debug, Clone, Default)]
struct Board {
    order: Vec<String>,
    slots: HashMap<String, Slot>,
    first_open: usize,
}

impl Board {
    fn add(&mut self, task_id: String, key: String, needed: usize) {
        self.order.push(task_id.clone());
        let slot = Slot {
            key,
            needed,
            answers: Vec::new(),
            leases: BTreeMap::new(),
            served: BTreeSet::new(),
            closed: false,
        };
        self.slots.insert(task_id, slot);
    }

    fn advance(&mut self) {
        while self.first_open < self.order.len() && self.slots[&self.order[self.first_open]].closed {
            self.first_open += 1;
        }
    }

    fn open_ids(&self) -> impl Iterator<Item = &String> {
        self.order[self.first_open..].iter().filter(|id| !self.slots[*id].closed)
    }

    /// Open task this annotator holds an unexpired lease on.
    fn held(&self, annotator: &str, now: u64) -> Option<String> {
        self.open_ids()
            .find(|id| self.slots[*id].leases.get(annotator).is_some_and(|&d| d > now))
            .cloned()
    }

    fn available(&self, annotator: &str, now: u64) -> Option<String> {
        self.open_ids()
            .find(|id| {
                let s = &self.slots[*id];
                let active = s.leases.values().filter(|&&d| d > now).count();
                !s.served.contains(annotator) && s.answers.len() + active < s.needed
            })
            .cloned()
    }

    fn is_complete(&self) -> bool {
        self.open_ids().next().is_none()
    }
}

/// Exported state of a run; every field is a fold over the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub run_id: String,
    pub corpus_id: String,
    pub phase: Phase,
    pub sessions: Vec<SessionState>,
    pub shortlist: Vec<TopicProfile>,
    pub topic_votes: BTreeMap<String, Vec<Vec<bool>>>,
    pub topic_vectors: BTreeMap<String, TopicVector>,
    pub labels: Vec<PairRecord>,
    pub consolidation: Option<ConsolidationStats>,
    pub clustering: Option<SweepResult>,
    pub representatives: Vec<Representative>,
    pub baseline: Option<BaselineResult>,
    pub matches: Vec<MethodMatch>,
    pub report: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMatch {
    pub method: String,
    #[serde(flatten)]
    pub record: MatchRecord,
}

/// Progress summary served while a run is live.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub run_id: String,
    pub phase: Phase,
    pub sessions: usize,
    pub sessions_done: usize,
    pub arguments: usize,
    pub topic_tasks_open: usize,
    pub pairs: Progress,
    pub human_queries: usize,
    pub clusters: Option<usize>,
    pub match_tasks_open: usize,
    pub report: Option<EvalReport>,
}

pub const HYENA: &str = "hyena";
pub const AUTOMATED: &str = "automated";

pub struct Engine {
    config: EngineConfig,
    opinions: Vec<Opinion>,
    opinion_index: HashMap<String, usize>,
    embeddings: EmbeddingStore,
    quality: HashMap<String, f64>,
    topics: Vec<TopicProfile>,
    embedder: Box<dyn ArgumentEmbedder>,
    synthesis: Option<Box<dyn SynthesisClient>>,
    recorder: Recorder,
    phase: Phase,
    sessions: Vec<SessionState>,
    session_index: HashMap<String, usize>,
    session_of: HashMap<String, usize>,
    shortlist: Vec<TopicProfile>,
    topic_board: Board,
    topic_vectors: BTreeMap<String, TopicVector>,
    scheduler: Option<MultiPathScheduler>,
    pair_board: Board,
    labeled: usize,
    clustering: Option<SweepResult>,
    representatives: Vec<Representative>,
    baseline: Option<BaselineResult>,
    match_board: Board,
    matches: Vec<MethodMatch>,
    report: Option<EvalReport>,
    last_served: HashMap<TaskKind, String>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("run_id", &self.config.run_id)
            .field("phase", &self.phase)
            .field("events", &self.recorder.log().len())
            .finish()
    }
}

impl Engine {
    /// Builds the engine over `log`, replaying any records it already holds.
    pub fn open(
        config: EngineConfig,
        inputs: RunInputs,
        embedder: Box<dyn ArgumentEmbedder>,
        synthesis: Option<Box<dyn SynthesisClient>>,
        log: EventLog,
        halt_after: Option<usize>,
    ) -> Result<Self, EngineError> {
        config.validate()?;
        let mut opinions: Vec<Opinion> =
            inputs.opinions.into_iter().filter(|o| o.corpus_id == config.corpus_id).collect();
        if opinions.is_empty() {
            return Err(EngineError::Input(format!("corpus {} has no opinions", config.corpus_id)));
        }
        opinions.sort_by(|a, b| a.id.cmp(&b.id));
        for o in &opinions {
            if !inputs.embeddings.contains(&o.id) {
                return Err(EngineError::Input(format!("no embedding for opinion {}", o.id)));
            }
        }
        let opinion_index = opinions.iter().enumerate().map(|(k, o)| (o.id.clone(), k)).collect();
        let shortlist = if inputs.topics.is_empty() {
            Vec::new()
        } else {
            shortlist_topics(&inputs.topics, config.max_topics).map_err(|e| EngineError::Input(e.to_string()))?
        };
        let mut engine = Self {
            opinions,
            opinion_index,
            embeddings: inputs.embeddings,
            quality: inputs.quality,
            topics: inputs.topics,
            embedder,
            synthesis,
            recorder: Recorder::new(log).halt_after(halt_after),
            phase: Phase::Phase1,
            sessions: Vec::new(),
            session_index: HashMap::new(),
            session_of: HashMap::new(),
            shortlist,
            topic_board: Board::default(),
            topic_vectors: BTreeMap::new(),
            scheduler: None,
            pair_board: Board::default(),
            labeled: 0,
            clustering: None,
            representatives: Vec::new(),
            baseline: None,
            match_board: Board::default(),
            matches: Vec::new(),
            report: None,
            last_served: HashMap::new(),
            config,
        };
        engine.recorder.begin();
        engine.record(Event::RunStarted {
            run_id: engine.config.run_id.clone(),
            corpus_id: engine.config.corpus_id.clone(),
        })?;
        engine.record(Event::PhaseStarted { phase: Phase::Phase1 })?;
        engine.replay()?;
        Ok(engine)
    }

    fn replay(&mut self) -> Result<(), EngineError> {
        while let Some(rec) = self.recorder.peek().cloned() {
            match rec.event {
                Event::SessionCreated { annotator_id, .. } => {
                    self.create_session(&annotator_id)?;
                }
                Event::OpinionServed { session_id, .. } => {
                    self.next_opinion(&session_id)?;
                }
                Event::ActionRecorded { session_id, action, .. } => {
                    self.submit_action(&session_id, action)?;
                }
                Event::TaskServed { kind, annotator_id, .. } => {
                    self.next_task(kind, &annotator_id)?;
                }
                Event::TaskAnswered { task_id, annotator_id, answer } => {
                    self.answer_task(&task_id, &annotator_id, answer)?;
                }
                other => return Err(EngineError::UnexpectedEvent { seq: rec.seq, kind: other.kind() }),
            }
        }
        Ok(())
    }

    fn record(&mut self, event: Event) -> Result<(), EngineError> {
        self.recorder.record(event)?;
        Ok(())
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn log(&self) -> &EventLog {
        self.recorder.log()
    }

    pub fn into_log(self) -> EventLog {
        self.recorder.into_log()
    }

    pub fn opinions(&self) -> &[Opinion] {
        &self.opinions
    }

    pub fn opinion(&self, id: &str) -> Option<&Opinion> {
        self.opinion_index.get(id).map(|&k| &self.opinions[k])
    }

    pub fn embeddings(&self) -> &EmbeddingStore {
        &self.embeddings
    }

    pub fn quality(&self) -> &HashMap<String, f64> {
        &self.quality
    }

    pub fn topics(&self) -> &[TopicProfile] {
        &self.topics
    }

    pub fn shortlist(&self) -> &[TopicProfile] {
        &self.shortlist
    }

    pub fn sessions(&self) -> &[SessionState] {
        &self.sessions
    }

    pub fn session(&self, session_id: &str) -> Option<&SessionState> {
        self.session_index.get(session_id).map(|&k| &self.sessions[k])
    }

    pub fn session_of(&self, annotator_id: &str) -> Option<&SessionState> {
        self.session_of.get(annotator_id).map(|&k| &self.sessions[k])
    }

    /// All key arguments in session order.
    pub fn arguments(&self) -> Vec<&KeyArgument> {
        self.sessions.iter().flat_map(|s| s.arguments.iter()).collect()
    }

    pub fn argument(&self, id: &str) -> Option<&KeyArgument> {
        self.sessions.iter().flat_map(|s| s.arguments.iter()).find(|a| a.id == id)
    }

    pub fn scheduler(&self) -> Option<&MultiPathScheduler> {
        self.scheduler.as_ref()
    }

    pub fn clustering(&self) -> Option<&SweepResult> {
        self.clustering.as_ref()
    }

    pub fn representatives(&self) -> &[Representative] {
        &self.representatives
    }

    pub fn report(&self) -> Option<&EvalReport> {
        self.report.as_ref()
    }

    /// Annotator most recently served a task of `kind`.
    pub fn last_served(&self, kind: TaskKind) -> Option<&str> {
        self.last_served.get(&kind).map(String::as_str)
    }

    fn expect_phase(&self, expected: Phase) -> Result<(), EngineError> {
        if self.phase != expected {
            return Err(EngineError::WrongPhase { expected: expected.as_str(), actual: self.phase.as_str() });
        }
        Ok(())
    }

    fn enter(&mut self, phase: Phase) -> Result<(), EngineError> {
        self.phase = phase;
        self.record(Event::PhaseStarted { phase })
    }

    // ---- phase 1 -------------------------------------------------------

    /// Opens the annotator's session, or returns the one already open.
    pub fn create_session(&mut self, annotator_id: &str) -> Result<String, EngineError> {
        if let Some(s) = self.session_of(annotator_id) {
            return Ok(s.session_id.clone());
        }
        self.expect_phase(Phase::Phase1)?;
        if annotator_id.trim().is_empty() {
            return Err(EngineError::BadAnswer("annotator id is empty".into()));
        }
        if self.sessions.len() >= self.config.annotators {
            return Err(EngineError::SessionLimit(self.config.annotators));
        }
        let session_id = format!("s{}", self.sessions.len() + 1);
        self.recorder.begin();
        self.record(Event::SessionCreated { session_id: session_id.clone(), annotator_id: annotator_id.to_string() })?;
        let k = self.sessions.len();
        self.sessions.push(SessionState::new(&session_id, annotator_id, &self.config.corpus_id));
        self.session_index.insert(session_id.clone(), k);
        self.session_of.insert(annotator_id.to_string(), k);
        Ok(session_id)
    }

    fn session_done(&self, s: &SessionState) -> bool {
        s.pending.is_none() && (s.is_full(&self.config.sampler) || s.served.len() >= self.opinions.len())
    }

    fn opinion_envelope(&self, k: usize, now: u64) -> Option<TaskEnvelope> {
        let s = &self.sessions[k];
        let opinion_id = s.pending.as_ref()?;
        let o = self.opinion(opinion_id)?;
        Some(TaskEnvelope {
            task_id: format!("{}-o{:03}", s.session_id, s.served.len()),
            payload: TaskPayload::Phase1Opinion {
                session_id: s.session_id.clone(),
                opinion_id: o.id.clone(),
                text: o.text.clone(),
                suggested_stance: o.stance,
                arguments: s
                    .arguments
                    .iter()
                    .map(|a| ArgumentView { id: a.id.clone(), text: a.text.clone(), stance: a.stance })
                    .collect(),
                served: s.served.len(),
                session_length: self.config.sampler.session_length,
            },
            deadline_ms: now.saturating_add(self.config.lease_ms),
        })
    }

    /// Serves the session's next opinion; `None` once the session is done.
    /// A pending opinion is returned again until it is answered.
    pub fn next_opinion(&mut self, session_id: &str) -> Result<Option<TaskEnvelope>, EngineError> {
        let &k = self.session_index.get(session_id).ok_or_else(|| EngineError::UnknownSession(session_id.into()))?;
        let now = self.recorder.begin();
        if self.sessions[k].pending.is_some() {
            return Ok(self.opinion_envelope(k, now));
        }
        if self.phase != Phase::Phase1 || self.session_done(&self.sessions[k]) {
            return Ok(None);
        }
        let opinion_id = next_opinion(
            &self.sessions[k],
            &self.opinions,
            &self.embeddings,
            &self.quality,
            &self.config.sampler,
        )?;
        let mut s = self.sessions[k].clone();
        s.serve(&opinion_id, &self.config.sampler)?;
        self.record(Event::OpinionServed { session_id: session_id.to_string(), opinion_id })?;
        self.sessions[k] = s;
        Ok(self.opinion_envelope(k, now))
    }

    /// Applies an action to the session's pending opinion. Returns the new
    /// key argument, if one was created.
    pub fn submit_action(
        &mut self,
        session_id: &str,
        action: AnnotationAction,
    ) -> Result<Option<KeyArgument>, EngineError> {
        let &k = self.session_index.get(session_id).ok_or_else(|| EngineError::UnknownSession(session_id.into()))?;
        self.expect_phase(Phase::Phase1)?;
        let pending = self.sessions[k].pending.clone().ok_or(SamplingError::NoPendingOpinion)?;
        let suggested = self.opinion(&pending).map(|o| o.stance).expect("served opinions exist");
        let mut s = self.sessions[k].clone();
        let created = s.record_action(action.clone(), suggested)?;
        let vector = match &created {
            Some(arg) => {
                let v = match self.embedder.embed(arg) {
                    Some(v) => v,
                    None => self.embeddings.require(&arg.source_opinion_id)?.to_vec(),
                };
                if v.len() != self.embeddings.dim() {
                    return Err(EmbeddingError::DimensionMismatch {
                        id: arg.id.clone(),
                        got: v.len(),
                        expected: self.embeddings.dim(),
                    }
                    .into());
                }
                Some(v)
            }
            None => None,
        };
        self.recorder.begin();
        self.record(Event::ActionRecorded {
            session_id: session_id.to_string(),
            opinion_id: pending,
            action,
            suggested_stance: suggested,
            argument_id: created.as_ref().map(|a| a.id.clone()),
        })?;
        self.sessions[k] = s;
        if let (Some(arg), Some(v)) = (&created, vector) {
            self.embeddings.upsert(arg.id.clone(), v)?;
        }
        if self.sessions.len() == self.config.annotators && self.sessions.iter().all(|s| self.session_done(s)) {
            self.enter_topics()?;
        }
        Ok(created)
    }

    // ---- task board ----------------------------------------------------

    fn board(&self, kind: TaskKind) -> &Board {
        match kind {
            TaskKind::TopicAssign => &self.topic_board,
            TaskKind::PairSimilarity => &self.pair_board,
            TaskKind::MatchEval => &self.match_board,
            TaskKind::Phase1Opinion => unreachable!("phase 1 opinions are served per session"),
        }
    }

    fn board_mut(&mut self, kind: TaskKind) -> &mut Board {
        match kind {
            TaskKind::TopicAssign => &mut self.topic_board,
            TaskKind::PairSimilarity => &mut self.pair_board,
            TaskKind::MatchEval => &mut self.match_board,
            TaskKind::Phase1Opinion => unreachable!("phase 1 opinions are served per session"),
        }
    }

    fn kind_of(task_id: &str) -> Option<TaskKind> {
        match task_id.split_once('-')?.0 {
            "t" => Some(TaskKind::TopicAssign),
            "p" => Some(TaskKind::PairSimilarity),
            "m" => Some(TaskKind::MatchEval),
            _ => None,
        }
    }

    /// Oldest ready task of `kind` for the annotator, or the one they
    /// already hold. `None` when nothing is ready for them.
    pub fn next_task(&mut self, kind: TaskKind, annotator_id: &str) -> Result<Option<TaskEnvelope>, EngineError> {
        let now = self.recorder.begin();
        if kind == TaskKind::Phase1Opinion {
            let session_id = self
                .session_of(annotator_id)
                .map(|s| s.session_id.clone())
                .ok_or_else(|| EngineError::NoSession(annotator_id.into()))?;
            return self.next_opinion(&session_id);
        }
        if annotator_id.trim().is_empty() {
            return Err(EngineError::BadAnswer("annotator id is empty".into()));
        }
        let board = self.board(kind);
        if let Some(id) = board.held(annotator_id, now) {
            let deadline = board.slots[&id].leases[annotator_id];
            return Ok(Some(self.envelope(&id, deadline)));
        }
        let Some(id) = board.available(annotator_id, now) else {
            return Ok(None);
        };
        self.record(Event::TaskServed { task_id: id.clone(), kind, annotator_id: annotator_id.to_string() })?;
        let deadline = now.saturating_add(self.config.lease_ms);
        let slot = self.board_mut(kind).slots.get_mut(&id).expect("slot exists");
        slot.leases.insert(annotator_id.to_string(), deadline);
        slot.served.insert(annotator_id.to_string());
        self.last_served.insert(kind, annotator_id.to_string());
        Ok(Some(self.envelope(&id, deadline)))
    }

    /// Whether the annotator holds an unanswered lease on an open task.
    pub fn holds(&self, kind: TaskKind, annotator_id: &str) -> bool {
        if kind == TaskKind::Phase1Opinion {
            return self.session_of(annotator_id).is_some_and(|s| s.pending.is_some());
        }
        let board = self.board(kind);
        board.open_ids().any(|id| board.slots[id].leases.contains_key(annotator_id))
    }

    fn view(a: &KeyArgument) -> ArgumentView {
        ArgumentView { id: a.id.clone(), text: a.text.clone(), stance: a.stance }
    }

    fn envelope(&self, task_id: &str, deadline_ms: u64) -> TaskEnvelope {
        let kind = Self::kind_of(task_id).expect("board task ids are well formed");
        let key = &self.board(kind).slots[task_id].key;
        let payload = match kind {
            TaskKind::TopicAssign => {
                let a = self.argument(key).expect("topic task for a known argument");
                TaskPayload::TopicAssign {
                    argument_id: a.id.clone(),
                    text: a.text.clone(),
                    topics: self
                        .shortlist
                        .iter()
                        .map(|t| TopicView { topic_id: t.topic_id.clone(), top_words: t.top_words.clone() })
                        .collect(),
                }
            }
            TaskKind::PairSimilarity => {
                let sched = self.scheduler.as_ref().expect("pair tasks exist during consolidation");
                let pair = sched.record(&pair_from_key(key)).expect("pair exists").pair.clone();
                let first = Self::view(self.argument(&pair.i).expect("known argument"));
                let second = Self::view(self.argument(&pair.j).expect("known argument"));
                TaskPayload::PairSimilarity {
                    pair,
                    first,
                    second,
                    progress: Progress { labeled: self.labeled, total: sched.records().len() },
                }
            }
            TaskKind::MatchEval => {
                let (method, opinion_id) = key.split_once(':').expect("match key is method:opinion");
                let o = self.opinion(opinion_id).expect("known opinion");
                let (text, sources) = self.key_argument_for(method, opinion_id).expect("mapped opinion");
                TaskPayload::MatchEval {
                    opinion_id: o.id.clone(),
                    opinion_text: o.text.clone(),
                    key_argument: text,
                    sources,
                }
            }
            TaskKind::Phase1Opinion => unreachable!(),
        };
        TaskEnvelope { task_id: task_id.to_string(), payload, deadline_ms }
    }

    /// Records an answer to a served task.
    pub fn answer_task(&mut self, task_id: &str, annotator_id: &str, answer: TaskAnswer) -> Result<(), EngineError> {
        let kind = Self::kind_of(task_id).ok_or_else(|| EngineError::UnknownTask(task_id.into()))?;
        let slot = self.board(kind).slots.get(task_id).ok_or_else(|| EngineError::UnknownTask(task_id.into()))?;
        if slot.answers.iter().any(|(a, _)| a == annotator_id) {
            return Err(EngineError::AlreadyAnswered { task: task_id.into(), annotator: annotator_id.into() });
        }
        if !slot.served.contains(annotator_id) {
            return Err(EngineError::NotServed { task: task_id.into(), annotator: annotator_id.into() });
        }
        if slot.closed || slot.answers.len() >= slot.needed {
            return Err(EngineError::Stale(task_id.into()));
        }
        match (kind, &answer) {
            (TaskKind::TopicAssign, TaskAnswer::Topics(v)) if v.len() == self.shortlist.len() => {}
            (TaskKind::TopicAssign, TaskAnswer::Topics(v)) => {
                return Err(EngineError::BadAnswer(format!(
                    "expected {} topic flags, got {}",
                    self.shortlist.len(),
                    v.len()
                )))
            }
            (TaskKind::PairSimilarity, TaskAnswer::Similar(_)) | (TaskKind::MatchEval, TaskAnswer::Match(_)) => {}
            _ => return Err(EngineError::BadAnswer(format!("answer does not fit a {kind:?} task"))),
        }
        self.recorder.begin();
        self.record(Event::TaskAnswered {
            task_id: task_id.to_string(),
            annotator_id: annotator_id.to_string(),
            answer: answer.clone(),
        })?;
        let slot = self.board_mut(kind).slots.get_mut(task_id).expect("checked above");
        slot.leases.remove(annotator_id);
        slot.answers.push((annotator_id.to_string(), answer));
        if slot.answers.len() < slot.needed {
            return Ok(());
        }
        slot.closed = true;
        let key = slot.key.clone();
        let answers: Vec<TaskAnswer> = slot.answers.iter().map(|(_, a)| a.clone()).collect();
        self.board_mut(kind).advance();
        match kind {
            TaskKind::TopicAssign => self.close_topic_task(&key, answers),
            TaskKind::PairSimilarity => self.close_pair_task(&key, answers),
            TaskKind::MatchEval => self.close_match_task(&key, answers),
            TaskKind::Phase1Opinion => unreachable!(),
        }
    }

    // ---- topics --------------------------------------------------------

    fn enter_topics(&mut self) -> Result<(), EngineError> {
        let ids: Vec<String> = self.arguments().iter().map(|a| a.id.clone()).collect();
        if ids.is_empty() || self.shortlist.is_empty() || self.config.topic_votes == 0 {
            for id in ids {
                self.topic_vectors.insert(id, TopicVector::new(vec![0; self.shortlist.len()]));
            }
            return self.enter_consolidation();
        }
        for id in ids {
            self.topic_board.add(format!("t-{id}"), id, self.config.topic_votes);
        }
        self.enter(Phase::Topics)
    }

    fn close_topic_task(&mut self, argument_id: &str, answers: Vec<TaskAnswer>) -> Result<(), EngineError> {
        let votes: Vec<Vec<bool>> = answers
            .into_iter()
            .map(|a| match a {
                TaskAnswer::Topics(v) => v,
                _ => unreachable!("validated on answer"),
            })
            .collect();
        let vector = aggregate_topic_vectors(&votes).map_err(|e| EngineError::BadAnswer(e.to_string()))?;
        self.record(Event::TopicVectorAssigned { argument_id: argument_id.to_string(), counts: vector.counts.clone() })?;
        self.topic_vectors.insert(argument_id.to_string(), vector);
        if self.topic_board.is_complete() {
            self.enter_consolidation()?;
        }
        Ok(())
    }

    /// Per-annotator topic flags of every closed topic task.
    pub fn topic_votes(&self) -> BTreeMap<String, Vec<Vec<bool>>> {
        self.topic_board
            .slots
            .values()
            .map(|s| {
                let votes = s
                    .answers
                    .iter()
                    .filter_map(|(_, a)| match a {
                        TaskAnswer::Topics(v) => Some(v.clone()),
                        _ => None,
                    })
                    .collect();
                (s.key.clone(), votes)
            })
            .collect()
    }

    // ---- consolidation -------------------------------------------------

    fn enter_consolidation(&mut self) -> Result<(), EngineError> {
        let arguments: Vec<KeyArgument> = self.arguments().into_iter().cloned().collect();
        let topic_vectors: HashMap<String, TopicVector> =
            self.topic_vectors.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let records = score_all_pairs(&arguments, &self.embeddings, &topic_vectors)?;
        let scheduler = MultiPathScheduler::new(records)?;
        for (_, pair) in scheduler.pending() {
            self.pair_board.add(pair_task_id(&pair), pair.to_string(), self.config.similarity_votes);
        }
        self.scheduler = Some(scheduler);
        self.enter(Phase::Consolidation)?;
        if self.pair_board.is_complete() {
            self.finish_consolidation()?;
        }
        Ok(())
    }

    fn close_pair_task(&mut self, key: &str, answers: Vec<TaskAnswer>) -> Result<(), EngineError> {
        let votes: Vec<bool> = answers
            .into_iter()
            .map(|a| match a {
                TaskAnswer::Similar(b) => b,
                _ => unreachable!("validated on answer"),
            })
            .collect();
        let pair = pair_from_key(key);
        let sched = self.scheduler.as_mut().expect("consolidation running");
        let path = sched.path_of(&pair).expect("pair on a path");
        let outcome = sched.submit(&pair, &votes)?;
        let next = sched.next_query(path).cloned();
        self.labeled += 1 + outcome.propagated.len();
        self.record(Event::VotesRecorded { pair, votes, label: outcome.label })?;
        if !outcome.propagated.is_empty() {
            self.record(Event::LabelPropagated { label: outcome.label, pairs: outcome.propagated })?;
        }
        if let Some(next) = next {
            self.pair_board.add(pair_task_id(&next), next.to_string(), self.config.similarity_votes);
        }
        if self.pair_board.is_complete() {
            self.finish_consolidation()?;
        }
        Ok(())
    }

    fn finish_consolidation(&mut self) -> Result<(), EngineError> {
        let ids: Vec<String> = self.arguments().iter().map(|a| a.id.clone()).collect();
        if ids.is_empty() {
            return self.finish();
        }
        let sched = self.scheduler.as_ref().expect("consolidation running");
        let labels = label_lookup(sched.records());
        let graph = SimilarityGraph::from_labels(ids.iter(), sched.records())?;
        let sweep = sweep_select(
            &graph,
            |p: &PairId| {
                if p.i == p.j {
                    Some(Label::Similar)
                } else {
                    labels.get(p).copied()
                }
            },
            &self.config.louvain_grid,
            &self.config.spectral_grid(graph.len()),
            self.config.cluster_seed,
        )?;
        self.record(Event::ClusterComputed {
            method: sweep.best.method.clone(),
            param: sweep.best.param,
            error: sweep.best.error,
            clusters: sweep.best.clusters.clone(),
        })?;
        let clusters = sweep.best.clusters.clone();
        self.clustering = Some(sweep);
        self.select_representatives(&clusters)?;
        self.enter_matching()
    }

    // ---- selection -----------------------------------------------------

    /// Quality of an argument: its source opinion's score, 0 when absent.
    pub fn argument_quality(&self) -> HashMap<String, f64> {
        self.arguments()
            .iter()
            .map(|a| (a.id.clone(), self.quality.get(&a.source_opinion_id).copied().unwrap_or(0.0)))
            .collect()
    }

    fn select_representatives(&mut self, clusters: &[Vec<String>]) -> Result<(), EngineError> {
        let reps = self.choose_representatives(
            clusters,
            self.config.selection,
            self.config.selection_seed,
            self.config.prompt_template,
            self.synthesis.as_deref(),
            true,
        )?;
        for rep in reps {
            self.record(Event::RepresentativeChosen {
                cluster_id: rep.cluster_id,
                method: rep.method,
                text: rep.text.clone(),
                source_argument_id: rep.source_argument_id.clone(),
                score: rep.score,
                fallback: rep.fallback.clone(),
            })?;
            self.representatives.push(rep);
        }
        Ok(())
    }

    /// One scored representative per cluster. Prompted selection falls back
    /// to the centroid without a provider; with `reuse_logged` it takes
    /// representatives still ahead in the log being replayed.
    pub fn choose_representatives(
        &self,
        clusters: &[Vec<String>],
        method: SelectionMethod,
        seed: u64,
        template: PromptTemplate,
        synthesis: Option<&dyn SynthesisClient>,
        reuse_logged: bool,
    ) -> Result<Vec<Representative>, EngineError> {
        let all: HashMap<String, &KeyArgument> = self.arguments().into_iter().map(|a| (a.id.clone(), a)).collect();
        let quality = self.argument_quality();
        let scorer = TokenRecallScorer;
        let mut member_lists: Vec<Vec<&KeyArgument>> = Vec::with_capacity(clusters.len());
        for c in clusters {
            let members = c
                .iter()
                .map(|id| all.get(id).copied().ok_or_else(|| EngineError::Input(format!("unknown argument {id}"))))
                .collect::<Result<Vec<_>, _>>()?;
            member_lists.push(members);
        }
        let references: Vec<Vec<String>> =
            member_lists.iter().map(|m| m.iter().map(|a| a.text.clone()).collect()).collect();
        let cluster_seed = |k: usize| derive_seed(seed, &format!("cluster-{k}"));
        let threshold = if method == SelectionMethod::Prompted {
            let mut baseline = Vec::new();
            for (k, members) in member_lists.iter().enumerate() {
                let r = select_random(k, members, cluster_seed(k))?;
                baseline.push(scorer.score(&r.text, &references[k])?);
            }
            guard_threshold(&baseline)
        } else {
            0.0
        };
        let mut out = Vec::with_capacity(clusters.len());
        for (k, members) in member_lists.iter().enumerate() {
            let rep = match method {
                SelectionMethod::Centroid => select_centroid(k, members, &self.embeddings)?,
                SelectionMethod::Quality => select_quality(k, members, &quality)?,
                SelectionMethod::Random => select_random(k, members, cluster_seed(k))?,
                SelectionMethod::Prompted => match (reuse_logged.then(|| self.logged_representative(k)).flatten(), synthesis) {
                    (Some(logged), _) => logged,
                    (None, Some(client)) => PromptedSelector { client, template, scorer: &scorer, threshold, retries: 3 }
                        .select(k, members, &references[k], &self.embeddings)?,
                    (None, None) => {
                        let mut r = select_centroid(k, members, &self.embeddings)?;
                        r.fallback = Some("no synthesis provider configured".into());
                        r
                    }
                },
            };
            let score = match rep.score {
                Some(s) => s,
                None => scorer.score(&rep.text, &references[k])?,
            };
            out.push(Representative { score: Some(score), ..rep });
        }
        Ok(out)
    }

    pub fn cluster_seed(&self, k: usize) -> u64 {
        derive_seed(self.config.selection_seed, &format!("cluster-{k}"))
    }

    /// Provider output is not reproducible, so replays reuse the logged
    /// representative.
    fn logged_representative(&self, k: usize) -> Option<Representative> {
        self.recorder.pending().iter().find_map(|rec| match &rec.event {
            Event::RepresentativeChosen { cluster_id, method, text, source_argument_id, score, fallback }
                if *cluster_id == k =>
            {
                Some(Representative {
                    cluster_id: k,
                    method: *method,
                    text: text.clone(),
                    source_argument_id: source_argument_id.clone(),
                    score: *score,
                    fallback: fallback.clone(),
                })
            }
            _ => None,
        })
    }

    // ---- matching ------------------------------------------------------

    /// Opinion to argument id, from phase 1 actions.
    pub fn opinion_mapping(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for s in &self.sessions {
            let mut created = s.arguments.iter();
            for entry in &s.actions {
                match &entry.action {
                    AnnotationAction::NewArgument { .. } => {
                        if let Some(a) = created.next() {
                            out.insert(entry.opinion_id.clone(), a.id.clone());
                        }
                    }
                    AnnotationAction::Already { argument_id } => {
                        out.insert(entry.opinion_id.clone(), argument_id.clone());
                    }
                    AnnotationAction::Skip { .. } => {}
                }
            }
        }
        out
    }

    /// Cluster index of each argument.
    pub fn cluster_of(&self) -> HashMap<String, usize> {
        let mut out = HashMap::new();
        if let Some(c) = &self.clustering {
            for (k, members) in c.best.clusters.iter().enumerate() {
                for m in members {
                    out.insert(m.clone(), k);
                }
            }
        }
        out
    }

    /// Text of the key argument an opinion maps to under `method`, with the
    /// items it represents.
    pub fn key_argument_for(&self, method: &str, opinion_id: &str) -> Option<(String, Vec<String>)> {
        match method {
            HYENA => {
                let arg = self.opinion_mapping().get(opinion_id)?.clone();
                let k = *self.cluster_of().get(&arg)?;
                let rep = self.representatives.get(k)?;
                let members = self.clustering.as_ref()?.best.clusters.get(k)?.clone();
                Some((rep.text.clone(), members))
            }
            AUTOMATED => {
                let b = self.baseline.as_ref()?;
                let kp = &b.key_points[*b.mapping.get(opinion_id)?];
                Some((self.opinion(kp)?.text.clone(), vec![kp.clone()]))
            }
            _ => None,
        }
    }

    fn enter_matching(&mut self) -> Result<(), EngineError> {
        let ids: Vec<String> = self.opinions.iter().map(|o| o.id.clone()).collect();
        let k = self.representatives.len();
        self.baseline = automated_baseline(&ids, &self.embeddings, k, self.config.baseline_threshold, self.config.eval_seed).ok();
        let mapping = self.opinion_mapping();
        let annotated_h: BTreeSet<&String> = mapping.keys().collect();
        let mut common: Vec<String> = match &self.baseline {
            Some(b) => b.mapping.keys().filter(|o| annotated_h.contains(o)).cloned().collect(),
            None => Vec::new(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.eval_seed, "match-sample"));
        common.shuffle(&mut rng);
        common.truncate(self.config.match_sample);
        common.sort();
        if common.is_empty() || self.config.match_votes == 0 {
            return self.finish();
        }
        for o in &common {
            for method in [HYENA, AUTOMATED] {
                self.match_board.add(format!("m-{method}-{o}"), format!("{method}:{o}"), self.config.match_votes);
            }
        }
        self.enter(Phase::Matching)
    }

    fn close_match_task(&mut self, key: &str, answers: Vec<TaskAnswer>) -> Result<(), EngineError> {
        let votes: Vec<bool> = answers
            .into_iter()
            .map(|a| match a {
                TaskAnswer::Match(b) => b,
                _ => unreachable!("validated on answer"),
            })
            .collect();
        let (method, opinion_id) = key.split_once(':').expect("match key is method:opinion");
        let (text, _) = self.key_argument_for(method, opinion_id).expect("mapped opinion");
        let record = MatchRecord::from_votes(opinion_id, text.clone(), votes.clone())
            .map_err(|e| EngineError::BadAnswer(e.to_string()))?;
        self.record(Event::MatchJudged {
            opinion_id: opinion_id.to_string(),
            method: method.to_string(),
            key_argument: text,
            votes,
            z: record.z,
        })?;
        self.matches.push(MethodMatch { method: method.to_string(), record });
        if self.match_board.is_complete() {
            self.finish()?;
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<(), EngineError> {
        let report = crate::report::build_report(self);
        self.report = Some(report);
        self.record(Event::ReportEmitted { name: "report".into() })?;
        self.enter(Phase::Done)
    }

    pub fn matches(&self) -> &[MethodMatch] {
        &self.matches
    }

    pub fn baseline(&self) -> Option<&BaselineResult> {
        self.baseline.as_ref()
    }

    pub fn open_tasks(&self, kind: TaskKind) -> usize {
        match kind {
            TaskKind::Phase1Opinion => self.sessions.iter().filter(|s| s.pending.is_some()).count(),
            _ => self.board(kind).open_ids().count(),
        }
    }

    pub fn status(&self) -> RunStatus {
        let pairs = self.scheduler.as_ref().map_or(0, |s| s.records().len());
        RunStatus {
            run_id: self.config.run_id.clone(),
            phase: self.phase,
            sessions: self.sessions.len(),
            sessions_done: self.sessions.iter().filter(|s| self.session_done(s)).count(),
            arguments: self.arguments().len(),
            topic_tasks_open: self.open_tasks(TaskKind::TopicAssign),
            pairs: Progress { labeled: self.labeled, total: pairs },
            human_queries: self.scheduler.as_ref().map_or(0, MultiPathScheduler::human_queries),
            clusters: self.clustering.as_ref().map(|c| c.best.clusters.len()),
            match_tasks_open: self.open_tasks(TaskKind::MatchEval),
            report: self.report.clone(),
        }
    }

    pub fn artifacts(&self) -> RunArtifacts {
        RunArtifacts {
            run_id: self.config.run_id.clone(),
            corpus_id: self.config.corpus_id.clone(),
            phase: self.phase,
            sessions: self.sessions.clone(),
            shortlist: self.shortlist.clone(),
            topic_votes: self.topic_votes(),
            topic_vectors: self.topic_vectors.clone(),
            labels: self.scheduler.as_ref().map(|s| s.records().to_vec()).unwrap_or_default(),
            consolidation: self.scheduler.as_ref().map(MultiPathScheduler::stats),
            clustering: self.clustering.clone(),
            representatives: self.representatives.clone(),
            baseline: self.baseline.clone(),
            matches: self.matches.clone(),
            report: self.report.clone(),
        }
    }

    /// Per-pair similarity votes of every closed pair task, in close order.
    pub fn pair_votes(&self) -> Vec<Vec<bool>> {
        self.pair_board
            .order
            .iter()
            .map(|id| &self.pair_board.slots[id])
            .filter(|s| s.closed)
            .map(|s| {
                s.answers
                    .iter()
                    .filter_map(|(_, a)| match a {
                        TaskAnswer::Similar(b) => Some(*b),
                        _ => None,
                    })
                    .collect()
            })
            .collect()
    }
}

/// Task ids stay URL-safe: `p-{i}~{j}`.
pub fn pair_task_id(pair: &PairId) -> String {
    format!("p-{}~{}", pair.i, pair.j)
}

fn pair_from_key(key: &str) -> PairId {
    let (i, j) = key.split_once('|').expect("pair key is i|j");
    PairId::new(i, j)
}
