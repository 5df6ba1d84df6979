//! Opinion sampling and the per-annotator annotation session.
//!
//! Each annotator reads one opinion at a time. The next opinion is chosen in
//! two steps: a farthest-first traversal over cosine distance builds a small
//! candidate pool far away from everything the annotator has already seen
//! (served opinions and the arguments they wrote), then the candidate with
//! the highest quality score is served.

use std::collections::{HashMap, HashSet};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EmbeddingStore, KeyArgument, Opinion, Stance, TopicProfile, TopicVector};
use crate::similarity::{cosine_distance, SimilarityError};
use crate::util::fnv1a;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub pool_size: usize,
    pub session_length: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { pool_size: 5, session_length: 51, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    NoArgument,
    BadTranslation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnnotationAction {
    NewArgument {
        text: String,
        /// Annotator's stance; `None` accepts the suggestion.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stance: Option<Stance>,
    },
    Already {
        argument_id: String,
    },
    Skip {
        reason: SkipReason,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionEntry {
    pub opinion_id: String,
    pub action: AnnotationAction,
}

#[derive(Debug, Error, PartialEq)]
pub enum SamplingError {
    #[error("session is full ({0} opinions served)")]
    SessionFull(usize),
    #[error("no unseen opinions left in corpus {0}")]
    Exhausted(String),
    #[error("no embedding for {0}")]
    MissingEmbedding(String),
    #[error("similarity: {0}")]
    Similarity(#[from] SimilarityError),
    #[error("an opinion is already pending")]
    AlreadyPending,
    #[error("no opinion is pending")]
    NoPendingOpinion,
    #[error("argument {0} is not in this session's list")]
    UnknownArgument(String),
    #[error("argument text is empty")]
    EmptyArgument,
    #[error("opinion {0} was already served in this session")]
    AlreadyServed(String),
}

/// One annotator's Phase 1 session; also the session export document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub annotator_id: String,
    pub corpus_id: String,
    pub served: Vec<String>,
    pub actions: Vec<ActionEntry>,
    pub arguments: Vec<KeyArgument>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pending: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionCounts {
    pub new: usize,
    pub skip: usize,
    pub already: usize,
}

impl SessionState {
    pub fn new(session_id: impl Into<String>, annotator_id: impl Into<String>, corpus_id: impl Into<String>) -> Self {
        Self {
            session_id: session_id.into(),
            annotator_id: annotator_id.into(),
            corpus_id: corpus_id.into(),
            served: Vec::new(),
            actions: Vec::new(),
            arguments: Vec::new(),
            pending: None,
        }
    }

    pub fn is_full(&self, config: &SamplerConfig) -> bool {
        self.served.len() >= config.session_length
    }

    pub fn argument_ids(&self) -> impl Iterator<Item = &str> {
        self.arguments.iter().map(|a| a.id.as_str())
    }

    pub fn counts(&self) -> ActionCounts {
        let mut c = ActionCounts::default();
        for entry in &self.actions {
            match entry.action {
                AnnotationAction::NewArgument { .. } => c.new += 1,
                AnnotationAction::Skip { .. } => c.skip += 1,
                AnnotationAction::Already { .. } => c.already += 1,
            }
        }
        c
    }

    /// Marks `opinion_id` as served and pending.
    pub fn serve(&mut self, opinion_id: &str, config: &SamplerConfig) -> Result<(), SamplingError> {
        if self.pending.is_some() {
            return Err(SamplingError::AlreadyPending);
        }
        if self.is_full(config) {
            return Err(SamplingError::SessionFull(self.served.len()));
        }
        if self.served.iter().any(|s| s == opinion_id) {
            return Err(SamplingError::AlreadyServed(opinion_id.to_string()));
        }
        self.served.push(opinion_id.to_string());
        self.pending = Some(opinion_id.to_string());
        Ok(())
    }

    fn next_argument_id(&self) -> String {
        format!("{}-a{:03}", self.session_id, self.arguments.len())
    }

    /// Applies an action to the pending opinion. A new argument takes the
    /// annotator's stance when given, the suggestion otherwise.
    pub fn record_action(
        &mut self,
        action: AnnotationAction,
        suggested_stance: Stance,
    ) -> Result<Option<KeyArgument>, SamplingError> {
        let opinion_id = self.pending.clone().ok_or(SamplingError::NoPendingOpinion)?;
        let created = match &action {
            AnnotationAction::NewArgument { text, stance } => {
                let text = text.trim();
                if text.is_empty() {
                    return Err(SamplingError::EmptyArgument);
                }
                Some(KeyArgument {
                    id: self.next_argument_id(),
                    corpus_id: self.corpus_id.clone(),
                    text: text.to_string(),
                    stance: stance.unwrap_or(suggested_stance),
                    annotator_id: self.annotator_id.clone(),
                    source_opinion_id: opinion_id.clone(),
                    topic_vector: None,
                })
            }
            AnnotationAction::Already { argument_id } => {
                if !self.arguments.iter().any(|a| &a.id == argument_id) {
                    return Err(SamplingError::UnknownArgument(argument_id.clone()));
                }
                None
            }
            AnnotationAction::Skip { .. } => None,
        };
        if let Some(arg) = &created {
            self.arguments.push(arg.clone());
        }
        self.actions.push(ActionEntry { opinion_id, action });
        self.pending = None;
        Ok(created)
    }
}

/// Greedy k-center pool: repeatedly takes the candidate whose minimum cosine
/// distance to `seen` plus the already pooled candidates is largest. Ties go
/// to the lexicographically smaller id.
pub fn farthest_first_pool(
    candidates: &[&str],
    seen: &[&[f64]],
    embeddings: &EmbeddingStore,
    pool_size: usize,
) -> Result<Vec<String>, SamplingError> {
    let vectors: Vec<&[f64]> = candidates
        .iter()
        .map(|id| embeddings.get(id).ok_or_else(|| SamplingError::MissingEmbedding(id.to_string())))
        .collect::<Result<_, _>>()?;
    let mut min_dist = vec![f64::INFINITY; candidates.len()];
    for (i, v) in vectors.iter().enumerate() {
        for s in seen {
            min_dist[i] = min_dist[i].min(cosine_distance(v, s)?);
        }
    }
    let mut taken = vec![false; candidates.len()];
    let mut pool = Vec::with_capacity(pool_size);
    for _ in 0..pool_size.min(candidates.len()) {
        let mut best: Option<usize> = None;
        for i in 0..candidates.len() {
            if taken[i] {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) if min_dist[i] > min_dist[b] => Some(i),
                Some(b) if min_dist[i] == min_dist[b] && candidates[i] < candidates[b] => Some(i),
                keep => keep,
            };
        }
        let Some(b) = best else { break };
        taken[b] = true;
        pool.push(candidates[b].to_string());
        let chosen = vectors[b];
        for i in 0..candidates.len() {
            if !taken[i] {
                min_dist[i] = min_dist[i].min(cosine_distance(vectors[i], chosen)?);
            }
        }
    }
    Ok(pool)
}

/// Highest quality wins; missing scores count as 0, ties go to the smaller id.
pub fn pick_by_quality<'a>(pool: &'a [String], quality: &HashMap<String, f64>) -> Option<&'a String> {
    pool.iter().max_by(|a, b| {
        let qa = quality.get(*a).copied().unwrap_or(0.0);
        let qb = quality.get(*b).copied().unwrap_or(0.0);
        qa.total_cmp(&qb).then_with(|| b.cmp(a))
    })
}

/// Chooses the next opinion for a session without mutating it.
///
/// The first opinion of a session is drawn uniformly at random (seeded by the
/// config seed and the annotator id). Later picks run the farthest-first pool
/// against every served opinion and every argument the annotator extracted,
/// then take the highest-quality pool member.
pub fn next_opinion(
    session: &SessionState,
    opinions: &[Opinion],
    embeddings: &EmbeddingStore,
    quality: &HashMap<String, f64>,
    config: &SamplerConfig,
) -> Result<String, SamplingError> {
    if session.is_full(config) {
        return Err(SamplingError::SessionFull(session.served.len()));
    }
    let served: HashSet<&str> = session.served.iter().map(String::as_str).collect();
    let mut unseen: Vec<&str> = opinions
        .iter()
        .filter(|o| o.corpus_id == session.corpus_id && !served.contains(o.id.as_str()))
        .map(|o| o.id.as_str())
        .collect();
    if unseen.is_empty() {
        return Err(SamplingError::Exhausted(session.corpus_id.clone()));
    }
    unseen.sort_unstable();

    let mut seen: Vec<&[f64]> = Vec::with_capacity(session.served.len() + session.arguments.len());
    for id in &session.served {
        seen.push(embeddings.get(id).ok_or_else(|| SamplingError::MissingEmbedding(id.clone()))?);
    }
    // arguments without their own vector are represented by their source opinion
    seen.extend(session.arguments.iter().filter_map(|a| embeddings.get(&a.id)));

    if seen.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ fnv1a(session.annotator_id.as_bytes()));
        return Ok(unseen.choose(&mut rng).expect("non-empty").to_string());
    }
    let pool = farthest_first_pool(&unseen, &seen, embeddings, config.pool_size.max(1))?;
    Ok(pick_by_quality(&pool, quality).expect("pool non-empty").clone())
}

#[derive(Debug, Error, PartialEq)]
pub enum TopicError {
    #[error("topic list is empty")]
    Empty,
    #[error("topic vector length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no annotator vectors")]
    NoAnnotators,
}

pub const CLARITY_THRESHOLD: f64 = 2.5;

/// Keeps the non-duplicate topics among the `max_candidates` most frequent
/// (input order) whose mean clarity rating is above 2.5.
pub fn shortlist_topics(topics: &[TopicProfile], max_candidates: usize) -> Result<Vec<TopicProfile>, TopicError> {
    if topics.is_empty() {
        return Err(TopicError::Empty);
    }
    Ok(topics
        .iter()
        .take(max_candidates)
        .filter(|t| !t.duplicate && t.mean_clarity().is_some_and(|m| m > CLARITY_THRESHOLD))
        .map(|t| TopicProfile { kept: true, ..t.clone() })
        .collect())
}

/// Sums per-annotator n-hot topic selections into a count vector.
pub fn aggregate_topic_vectors(per_annotator: &[Vec<bool>]) -> Result<TopicVector, TopicError> {
    let first = per_annotator.first().ok_or(TopicError::NoAnnotators)?;
    let mut counts = vec![0u32; first.len()];
    for v in per_annotator {
        if v.len() != counts.len() {
            return Err(TopicError::LengthMismatch(counts.len(), v.len()));
        }
        for (c, &b) in counts.iter_mut().zip(v) {
            *c += u32::from(b);
        }
    }
    Ok(TopicVector::new(counts))
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("argument text is empty")]
pub struct EmptyArgument;

/// Length of the longest common character substring of the case-folded
/// texts, divided by the case-folded argument length.
pub fn overlap_ratio(opinion_text: &str, argument_text: &str) -> Result<f64, EmptyArgument> {
    let fold = |s: &str| s.chars().flat_map(char::to_lowercase).collect::<Vec<char>>();
    let arg = fold(argument_text);
    if arg.is_empty() {
        return Err(EmptyArgument);
    }
    let op = fold(opinion_text);
    Ok(longest_common_substring(&op, &arg) as f64 / arg.len() as f64)
}

fn longest_common_substring(a: &[char], b: &[char]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    let mut best = 0;
    for &ca in a {
        for (j, &cb) in b.iter().enumerate() {
            cur[j + 1] = if ca == cb { prev[j] + 1 } else { 0 };
            best = best.max(cur[j + 1]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    best
}
