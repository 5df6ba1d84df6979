//! Choosing one representative argument per cluster, the odd-one-out
//! coherence probe, and reference-based selection scoring.

use std::collections::{BTreeSet, HashMap};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EmbeddingStore, KeyArgument};
use crate::similarity::{cosine_distance, SimilarityError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    Random,
    Centroid,
    Quality,
    Prompted,
}

impl SelectionMethod {
    pub fn is_extractive(self) -> bool {
        !matches!(self, SelectionMethod::Prompted)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Representative {
    pub cluster_id: usize,
    pub method: SelectionMethod,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_argument_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    /// Why a prompted selection fell back to the centroid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<String>,
}

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("cluster is empty")]
    EmptyCluster,
    #[error("no embedding for {0}")]
    MissingEmbedding(String),
    #[error("no quality score for {0}")]
    MissingQuality(String),
    #[error("similarity: {0}")]
    Similarity(#[from] SimilarityError),
    #[error("references are empty")]
    EmptyReferences,
    #[error("synthesis failed: {0}")]
    Synthesis(String),
    #[error("need at least two clusters with a shared pair to sample triples")]
    NoValidTriples,
}

fn extractive(cluster_id: usize, method: SelectionMethod, arg: &KeyArgument) -> Representative {
    Representative {
        cluster_id,
        method,
        text: arg.text.clone(),
        source_argument_id: Some(arg.id.clone()),
        score: None,
        fallback: None,
    }
}

fn sorted_members<'a>(members: &[&'a KeyArgument]) -> Vec<&'a KeyArgument> {
    let mut m = members.to_vec();
    m.sort_by(|a, b| a.id.cmp(&b.id));
    m
}

/// Member with the lowest mean cosine distance to the other members.
pub fn select_centroid(
    cluster_id: usize,
    members: &[&KeyArgument],
    embeddings: &EmbeddingStore,
) -> Result<Representative, SelectionError> {
    let members = sorted_members(members);
    let first = *members.first().ok_or(SelectionError::EmptyCluster)?;
    let vectors: Vec<&[f64]> = members
        .iter()
        .map(|a| embeddings.get(&a.id).ok_or_else(|| SelectionError::MissingEmbedding(a.id.clone())))
        .collect::<Result<_, _>>()?;
    if members.len() == 1 {
        return Ok(extractive(cluster_id, SelectionMethod::Centroid, first));
    }
    let mut best = (f64::INFINITY, 0usize);
    for (x, v) in vectors.iter().enumerate() {
        let mut sum = 0.0;
        for (y, w) in vectors.iter().enumerate() {
            if x != y {
                sum += cosine_distance(v, w)?;
            }
        }
        let mean = sum / (vectors.len() - 1) as f64;
        if mean < best.0 {
            best = (mean, x);
        }
    }
    Ok(extractive(cluster_id, SelectionMethod::Centroid, members[best.1]))
}

/// Member with the highest quality score; ties go to the smaller id.
pub fn select_quality(
    cluster_id: usize,
    members: &[&KeyArgument],
    quality: &HashMap<String, f64>,
) -> Result<Representative, SelectionError> {
    let members = sorted_members(members);
    if members.is_empty() {
        return Err(SelectionError::EmptyCluster);
    }
    let mut best: Option<(f64, &KeyArgument)> = None;
    for a in members {
        let q = *quality.get(&a.id).ok_or_else(|| SelectionError::MissingQuality(a.id.clone()))?;
        if best.is_none_or(|(bq, _)| q > bq) {
            best = Some((q, a));
        }
    }
    Ok(extractive(cluster_id, SelectionMethod::Quality, best.expect("non-empty").1))
}

/// Uniform seeded draw; members are sorted first so input order is irrelevant.
pub fn select_random(cluster_id: usize, members: &[&KeyArgument], seed: u64) -> Result<Representative, SelectionError> {
    let members = sorted_members(members);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = *members.choose(&mut rng).ok_or(SelectionError::EmptyCluster)?;
    Ok(extractive(cluster_id, SelectionMethod::Random, pick))
}

pub const PROMPT_CONTEXT: &str = "COVID-19 pandemic";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptTemplate {
    /// For instruction-tuned models.
    Instruction,
    /// For plain next-token models.
    Completion,
}

impl PromptTemplate {
    pub fn id(self) -> &'static str {
        match self {
            PromptTemplate::Instruction => "instruction",
            PromptTemplate::Completion => "completion",
        }
    }

    pub fn closing(self) -> &'static str {
        match self {
            PromptTemplate::Instruction => {
                "Write a key argument that summarizes the above arguments, and make it short and concise."
            }
            PromptTemplate::Completion => "A short and concise key argument that summarizes the above arguments is:",
        }
    }

    /// Full prompt text for providers that take a raw prompt.
    pub fn render(self, context: &str, arguments: &[String]) -> String {
        let mut out = format!("Consider the context of the {context} and the following arguments:\n");
        for a in arguments {
            out.push_str("- ");
            out.push_str(a);
            out.push('\n');
        }
        out.push('\n');
        out.push_str(self.closing());
        out
    }
}

/// Request body sent to a synthesis provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisRequest {
    pub template_id: String,
    pub arguments: Vec<String>,
    pub context: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisResponse {
    pub text: String,
}

pub trait SynthesisClient: Send + Sync {
    fn synthesize(&self, request: &SynthesisRequest) -> Result<String, SelectionError>;
}

pub const SYNTHESIS_URL_ENV: &str = "KEYARG_SYNTHESIS_URL";
pub const SYNTHESIS_TOKEN_ENV: &str = "KEYARG_SYNTHESIS_TOKEN";

/// JSON-over-HTTP provider: POSTs a [`SynthesisRequest`], expects
/// `{"text": ...}`.
#[derive(Debug)]
pub struct HttpSynthesisClient {
    endpoint: String,
    credential: Option<String>,
    agent: ureq::Agent,
}

impl HttpSynthesisClient {
    pub fn new(endpoint: impl Into<String>, credential: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self { endpoint: endpoint.into(), credential, agent }
    }

    /// Reads the endpoint and credential from the environment, if set.
    pub fn from_env() -> Option<Self> {
        let endpoint = std::env::var(SYNTHESIS_URL_ENV).ok().filter(|s| !s.is_empty())?;
        let token = std::env::var(SYNTHESIS_TOKEN_ENV).ok().filter(|s| !s.is_empty());
        Some(Self::new(endpoint, token, Duration::from_secs(60)))
    }
}

impl SynthesisClient for HttpSynthesisClient {
    fn synthesize(&self, request: &SynthesisRequest) -> Result<String, SelectionError> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(token) = &self.credential {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req
            .send_json(request)
            .map_err(|e| SelectionError::Synthesis(e.to_string()))?;
        let body: SynthesisResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| SelectionError::Synthesis(e.to_string()))?;
        Ok(body.text)
    }
}

/// Caps the number of in-flight requests to an inner client.
pub struct LimitedClient<C> {
    inner: C,
    cap: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

impl<C: SynthesisClient> LimitedClient<C> {
    pub fn new(inner: C, cap: usize) -> Self {
        Self { inner, cap: cap.max(1), in_flight: Mutex::new(0), freed: Condvar::new() }
    }
}

impl<C: SynthesisClient> SynthesisClient for LimitedClient<C> {
    fn synthesize(&self, request: &SynthesisRequest) -> Result<String, SelectionError> {
        {
            let mut n = self.in_flight.lock().expect("lock");
            while *n >= self.cap {
                n = self.freed.wait(n).expect("lock");
            }
            *n += 1;
        }
        let out = self.inner.synthesize(request);
        *self.in_flight.lock().expect("lock") -= 1;
        self.freed.notify_one();
        out
    }
}

pub trait SelectionScorer: Send + Sync {
    /// Higher means more of the references' content is covered.
    fn score(&self, candidate: &str, references: &[String]) -> Result<f64, SelectionError>;
}

const STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "all", "am", "an", "and", "any", "are", "as", "at", "be",
    "because", "been", "before", "being", "below", "between", "both", "but", "by", "can", "could", "did", "do",
    "does", "doing", "down", "during", "each", "few", "for", "from", "further", "had", "has", "have", "having", "he",
    "her", "here", "hers", "herself", "him", "himself", "his", "how", "i", "if", "in", "into", "is", "it", "its",
    "itself", "just", "me", "more", "most", "my", "myself", "no", "nor", "not", "now", "of", "off", "on", "once",
    "only", "or", "other", "our", "ours", "ourselves", "out", "over", "own", "same", "she", "should", "so", "some",
    "such", "than", "that", "the", "their", "theirs", "them", "themselves", "then", "there", "these", "they", "this",
    "those", "through", "to", "too", "under", "until", "up", "very", "was", "we", "were", "what", "when", "where",
    "which", "while", "who", "whom", "why", "will", "with", "would", "you", "your", "yours", "yourself",
];

/// Case-folded alphanumeric tokens minus stopwords.
pub fn content_tokens(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.chars().flat_map(char::to_lowercase).collect::<String>())
        .filter(|t| STOPWORDS.binary_search(&t.as_str()).is_err())
        .collect()
}

/// Fraction of the references' content tokens that the candidate contains.
#[derive(Debug, Clone, Copy, Default)]
pub struct TokenRecallScorer;

impl SelectionScorer for TokenRecallScorer {
    fn score(&self, candidate: &str, references: &[String]) -> Result<f64, SelectionError> {
        if references.is_empty() {
            return Err(SelectionError::EmptyReferences);
        }
        let union: BTreeSet<String> = references.iter().flat_map(|r| content_tokens(r)).collect();
        if union.is_empty() {
            return Ok(0.0);
        }
        let cand = content_tokens(candidate);
        Ok(union.iter().filter(|t| cand.contains(*t)).count() as f64 / union.len() as f64)
    }
}

pub fn score_selection(
    representative: &str,
    references: &[String],
    scorer: &dyn SelectionScorer,
) -> Result<f64, SelectionError> {
    scorer.score(representative, references)
}

/// 5th percentile (nearest rank) of baseline scores.
pub fn guard_threshold(baseline_scores: &[f64]) -> f64 {
    if baseline_scores.is_empty() {
        return 0.0;
    }
    let mut s = baseline_scores.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((0.05 * s.len() as f64).ceil() as usize).max(1);
    s[rank - 1]
}

fn single_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Abstractive selection through a synthesis provider, guarded by the
/// selection score.
pub struct PromptedSelector<'a> {
    pub client: &'a dyn SynthesisClient,
    pub template: PromptTemplate,
    pub scorer: &'a dyn SelectionScorer,
    pub threshold: f64,
    pub retries: usize,
}

impl PromptedSelector<'_> {
    /// Falls back to the centroid member when the provider fails, returns
    /// nothing usable, or scores below the threshold against `references`.
    pub fn select(
        &self,
        cluster_id: usize,
        members: &[&KeyArgument],
        references: &[String],
        embeddings: &EmbeddingStore,
    ) -> Result<Representative, SelectionError> {
        let members = sorted_members(members);
        if members.is_empty() {
            return Err(SelectionError::EmptyCluster);
        }
        let request = SynthesisRequest {
            template_id: self.template.id().into(),
            arguments: members.iter().map(|a| a.text.clone()).collect(),
            context: PROMPT_CONTEXT.into(),
        };
        let mut last_err = String::new();
        let mut text = None;
        for _ in 0..=self.retries {
            match self.client.synthesize(&request) {
                Ok(t) => {
                    text = Some(t);
                    break;
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        let fallback = |reason: String| -> Result<Representative, SelectionError> {
            let mut rep = select_centroid(cluster_id, &members, embeddings)?;
            rep.score = Some(self.scorer.score(&rep.text, references)?);
            rep.fallback = Some(reason);
            Ok(rep)
        };
        let Some(raw) = text else {
            return fallback(format!("synthesis failed after {} attempts: {last_err}", self.retries + 1));
        };
        let text = single_line(&raw);
        if text.is_empty() {
            return fallback("empty synthesis".into());
        }
        let score = self.scorer.score(&text, references)?;
        if score < self.threshold {
            return fallback(format!("score {score:.4} below guard threshold {:.4}", self.threshold));
        }
        Ok(Representative {
            cluster_id,
            method: SelectionMethod::Prompted,
            text,
            source_argument_id: None,
            score: Some(score),
            fallback: None,
        })
    }
}

/// Two arguments from one cluster and one from another, shuffled;
/// `odd_index` is the position of the outsider.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripleTask {
    pub ids: [String; 3],
    pub odd_index: usize,
}

/// Samples triples uniformly over all (same, same, other) combinations.
pub fn sample_triples(clusters: &[Vec<String>], count: usize, seed: u64) -> Result<Vec<TripleTask>, SelectionError> {
    let total: usize = clusters.iter().map(Vec::len).sum();
    let weights: Vec<f64> = clusters
        .iter()
        .map(|c| {
            let n = c.len() as f64;
            n * (n - 1.0) / 2.0 * (total - c.len()) as f64
        })
        .collect();
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        return Err(SelectionError::NoValidTriples);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut u = rng.random::<f64>() * sum;
        let mut home = weights.len() - 1;
        for (k, &w) in weights.iter().enumerate() {
            if u < w {
                home = k;
                break;
            }
            u -= w;
        }
        while weights[home] == 0.0 {
            home -= 1;
        }
        let c = &clusters[home];
        let a = rng.random_range(0..c.len());
        let mut b = rng.random_range(0..c.len() - 1);
        if b >= a {
            b += 1;
        }
        let mut o = rng.random_range(0..total - c.len());
        let mut other = None;
        for (k, oc) in clusters.iter().enumerate() {
            if k == home {
                continue;
            }
            if o < oc.len() {
                other = Some(oc[o].clone());
                break;
            }
            o -= oc.len();
        }
        let odd_index = rng.random_range(0..3);
        let mut ids = [c[a].clone(), c[b].clone(), String::new()];
        ids.swap(2, odd_index);
        ids[odd_index] = other.expect("outsider exists");
        out.push(TripleTask { ids, odd_index });
    }
    Ok(out)
}

/// A strategy that names the deviating member of a triple.
pub trait TripleJudge {
    fn pick(&mut self, ids: &[String; 3], texts: &[String; 3]) -> Result<usize, SelectionError>;
}

pub struct RandomJudge {
    rng: ChaCha8Rng,
}

impl RandomJudge {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl TripleJudge for RandomJudge {
    fn pick(&mut self, _: &[String; 3], _: &[String; 3]) -> Result<usize, SelectionError> {
        Ok(self.rng.random_range(0..3))
    }
}

/// Picks the member with the largest summed cosine distance to the others.
pub struct CentroidDistanceJudge<'a> {
    pub embeddings: &'a EmbeddingStore,
}

impl TripleJudge for CentroidDistanceJudge<'_> {
    fn pick(&mut self, ids: &[String; 3], _: &[String; 3]) -> Result<usize, SelectionError> {
        let v: Vec<&[f64]> = ids
            .iter()
            .map(|id| self.embeddings.get(id).ok_or_else(|| SelectionError::MissingEmbedding(id.clone())))
            .collect::<Result<_, _>>()?;
        let d01 = cosine_distance(v[0], v[1])?;
        let d02 = cosine_distance(v[0], v[2])?;
        let d12 = cosine_distance(v[1], v[2])?;
        let sums = [d01 + d02, d01 + d12, d02 + d12];
        let mut best = 0;
        for k in 1..3 {
            if sums[k] > sums[best] {
                best = k;
            }
        }
        Ok(best)
    }
}

/// Asks a synthesis provider (template `odd_one_out`) and reads the first
/// digit 1–3 of its answer.
pub struct PromptedJudge<'a> {
    pub client: &'a dyn SynthesisClient,
}

impl TripleJudge for PromptedJudge<'_> {
    fn pick(&mut self, _: &[String; 3], texts: &[String; 3]) -> Result<usize, SelectionError> {
        let request = SynthesisRequest {
            template_id: "odd_one_out".into(),
            arguments: texts.to_vec(),
            context: PROMPT_CONTEXT.into(),
        };
        let answer = self.client.synthesize(&request)?;
        answer
            .chars()
            .find_map(|c| c.to_digit(10).filter(|d| (1..=3).contains(d)))
            .map(|d| d as usize - 1)
            .ok_or_else(|| SelectionError::Synthesis(format!("no index in answer {answer:?}")))
    }
}

/// Runs a judge over tasks; returns per-task correctness.
pub fn odd_one_out(
    judge: &mut dyn TripleJudge,
    tasks: &[TripleTask],
    text_of: &dyn Fn(&str) -> String,
) -> Result<Vec<bool>, SelectionError> {
    tasks
        .iter()
        .map(|t| {
            let texts = [text_of(&t.ids[0]), text_of(&t.ids[1]), text_of(&t.ids[2])];
            judge.pick(&t.ids, &texts).map(|k| k == t.odd_index)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Stance;
    use proptest::prelude::*;
    use rand::Rng;

    fn arg(id: &str, text: &str) -> KeyArgument {
        KeyArgument {
            id: id.into(),
            corpus_id: "c".into(),
            text: text.into(),
            stance: Stance::Pro,
            annotator_id: "ann".into(),
            source_opinion_id: format!("o-{id}"),
            topic_vector: None,
        }
    }

    #[test]
    fn stopwords_sorted() {
        assert!(STOPWORDS.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn centroid_fixtures() {
        let a = arg("a", "A");
        let mut e = EmbeddingStore::new(2).unwrap();
        e.insert("a", vec![1.0, 0.0]).unwrap();
        assert_eq!(select_centroid(0, &[&a], &e).unwrap().source_argument_id.as_deref(), Some("a"));

        // three directions in one quadrant, "m" in the middle
        let (x, m, y) = (arg("x", "X"), arg("m", "M"), arg("y", "Y"));
        let mut e = EmbeddingStore::new(2).unwrap();
        e.insert("x", vec![1.0, 0.0]).unwrap();
        e.insert("m", vec![1.0, 1.0]).unwrap();
        e.insert("y", vec![0.0, 1.0]).unwrap();
        let r = select_centroid(3, &[&x, &y, &m], &e).unwrap();
        assert_eq!(r.source_argument_id.as_deref(), Some("m"));
        assert_eq!(r.text, "M");
        assert_eq!(r.cluster_id, 3);
        let err = select_centroid(0, &[&arg("q", "Q")], &e).unwrap_err();
        assert_eq!(err, SelectionError::MissingEmbedding("q".into()));
        assert_eq!(select_centroid(0, &[], &e).unwrap_err(), SelectionError::EmptyCluster);
    }

    #[test]
    fn quality_fixtures() {
        let (a, b) = (arg("a", "A"), arg("b", "B"));
        let q = HashMap::from([("a".to_string(), 0.2), ("b".to_string(), 0.9)]);
        assert_eq!(select_quality(0, &[&a, &b], &q).unwrap().text, "B");
        let q = HashMap::from([("a".to_string(), 0.5), ("b".to_string(), 0.5)]);
        assert_eq!(select_quality(0, &[&b, &a], &q).unwrap().text, "A");
        let q = HashMap::from([("a".to_string(), 0.5)]);
        assert_eq!(select_quality(0, &[&a, &b], &q).unwrap_err(), SelectionError::MissingQuality("b".into()));
    }

    #[test]
    fn random_fixtures() {
        let a = arg("a", "A");
        assert_eq!(select_random(0, &[&a], 5).unwrap().text, "A");
        let members: Vec<KeyArgument> = (0..4).map(|k| arg(&format!("m{k}"), &format!("T{k}"))).collect();
        let refs: Vec<&KeyArgument> = members.iter().collect();
        let once = select_random(0, &refs, 77).unwrap();
        let mut rev = refs.clone();
        rev.reverse();
        assert_eq!(select_random(0, &rev, 77).unwrap(), once);

        let mut counts = HashMap::new();
        for s in 0..10_000u64 {
            *counts.entry(select_random(0, &refs, s).unwrap().text).or_insert(0usize) += 1;
        }
        let sigma = (10_000.0f64 * 0.25 * 0.75).sqrt();
        for c in counts.values() {
            assert!((*c as f64 - 2500.0).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn scorer_fixtures() {
        let s = TokenRecallScorer;
        let r = vec!["Economic damage is too high".to_string()];
        assert_eq!(s.score("Economic damage is too high", &r).unwrap(), 1.0);
        assert_eq!(s.score("Children need school", &r).unwrap(), 0.0);
        assert_eq!(s.score("x", &[]).unwrap_err(), SelectionError::EmptyReferences);

        let pair = vec!["Shops lose revenue".to_string(), "Children miss friends".to_string()];
        let concat = format!("{} {}", pair[0], pair[1]);
        let c = s.score(&concat, &pair).unwrap();
        for single in &pair {
            assert!(c >= s.score(single, &pair).unwrap());
        }
    }

    #[test]
    fn guard_percentile() {
        let scores: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(guard_threshold(&scores), 5.0);
        assert_eq!(guard_threshold(&[0.3]), 0.3);
    }

    struct Echo;
    impl SynthesisClient for Echo {
        fn synthesize(&self, r: &SynthesisRequest) -> Result<String, SelectionError> {
            Ok(format!("  {}\n", r.arguments[0]))
        }
    }
    struct Fixed(&'static str);
    impl SynthesisClient for Fixed {
        fn synthesize(&self, _: &SynthesisRequest) -> Result<String, SelectionError> {
            Ok(self.0.to_string())
        }
    }
    struct Failing(std::sync::atomic::AtomicUsize);
    impl SynthesisClient for Failing {
        fn synthesize(&self, _: &SynthesisRequest) -> Result<String, SelectionError> {
            self.0.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            Err(SelectionError::Synthesis("timeout".into()))
        }
    }

    fn paraphrases() -> (Vec<KeyArgument>, EmbeddingStore, Vec<String>) {
        let members = vec![
            arg("p0", "Economic damage is too high"),
            arg("p1", "The economic damage is far too high"),
            arg("p2", "Too much economic damage"),
        ];
        let mut e = EmbeddingStore::new(2).unwrap();
        e.insert("p0", vec![1.0, 0.1]).unwrap();
        e.insert("p1", vec![1.0, 0.0]).unwrap();
        e.insert("p2", vec![1.0, 0.2]).unwrap();
        let refs = members.iter().map(|m| m.text.clone()).collect();
        (members, e, refs)
    }

    #[test]
    fn prompted_paths() {
        let (members, e, refs) = paraphrases();
        let m: Vec<&KeyArgument> = members.iter().collect();
        let scorer = TokenRecallScorer;
        fn sel<'a>(client: &'a dyn SynthesisClient, scorer: &'a TokenRecallScorer) -> PromptedSelector<'a> {
            PromptedSelector {
            client,
            template: PromptTemplate::Instruction,
            scorer,
            threshold: 0.3,
            retries: 2,
            }
        }

        let r = sel(&Echo, &scorer).select(0, &m, &refs, &e).unwrap();
        assert_eq!(r.method, SelectionMethod::Prompted);
        assert_eq!(r.text, "Economic damage is too high");
        assert!(r.fallback.is_none() && r.source_argument_id.is_none());

        let r = sel(&Fixed("   "), &scorer).select(0, &m, &refs, &e).unwrap();
        assert_eq!(r.method, SelectionMethod::Centroid);
        assert_eq!(r.source_argument_id.as_deref(), Some("p0"));
        assert!(r.fallback.unwrap().contains("empty"));

        let r = sel(&Fixed("Bananas are yellow"), &scorer).select(0, &m, &refs, &e).unwrap();
        assert_eq!(r.method, SelectionMethod::Centroid);
        assert!(r.fallback.unwrap().contains("below guard"));

        let failing = Failing(Default::default());
        let r = sel(&failing, &scorer).select(0, &m, &refs, &e).unwrap();
        assert_eq!(failing.0.load(std::sync::atomic::Ordering::SeqCst), 3);
        assert!(r.fallback.unwrap().contains("timeout"));
    }

    #[test]
    fn unrelated_text_scores_below_random_member_baseline() {
        // guard threshold from random-member selections over many clusters
        let (members, _, refs) = paraphrases();
        let m: Vec<&KeyArgument> = members.iter().collect();
        let baseline: Vec<f64> = (0..200)
            .map(|s| {
                let r = select_random(0, &m, s).unwrap();
                TokenRecallScorer.score(&r.text, &refs).unwrap()
            })
            .collect();
        let threshold = guard_threshold(&baseline);
        assert!(threshold > 0.0);
        assert!(TokenRecallScorer.score("Bananas are yellow", &refs).unwrap() < threshold);
    }

    #[test]
    fn templates_render() {
        let p = PromptTemplate::Completion.render(PROMPT_CONTEXT, &["one".into(), "two".into()]);
        assert_eq!(
            p,
            "Consider the context of the COVID-19 pandemic and the following arguments:\n- one\n- two\n\nA short and concise key argument that summarizes the above arguments is:"
        );
        assert!(PromptTemplate::Instruction.render(PROMPT_CONTEXT, &[]).ends_with("make it short and concise."));
        let body = serde_json::to_value(SynthesisRequest {
            template_id: "instruction".into(),
            arguments: vec!["a".into()],
            context: PROMPT_CONTEXT.into(),
        })
        .unwrap();
        assert_eq!(body, serde_json::json!({"template_id":"instruction","arguments":["a"],"context":"COVID-19 pandemic"}));
    }

    #[test]
    fn centroid_judge_duplicate_pair() {
        let mut e = EmbeddingStore::new(2).unwrap();
        e.insert("a", vec![0.0, 1.0]).unwrap();
        e.insert("b", vec![0.0, 1.0]).unwrap();
        e.insert("c", vec![1.0, 0.0]).unwrap();
        let mut j = CentroidDistanceJudge { embeddings: &e };
        let ids = ["a".to_string(), "b".to_string(), "c".to_string()];
        let texts = ids.clone();
        assert_eq!(j.pick(&ids, &texts).unwrap(), 2);
    }

    #[test]
    fn prompted_judge_parses_index() {
        let texts = ["x".to_string(), "y".to_string(), "z".to_string()];
        let mut j = PromptedJudge { client: &Fixed("The odd one is 2.") };
        assert_eq!(j.pick(&texts, &texts).unwrap(), 1);
        let mut j = PromptedJudge { client: &Fixed("none") };
        assert!(j.pick(&texts, &texts).is_err());
    }

    #[test]
    fn triples_are_valid() {
        let clusters = vec![
            vec!["a0".to_string(), "a1".into(), "a2".into()],
            vec!["b0".to_string(), "b1".into()],
            vec!["c0".to_string()],
        ];
        let cluster_of = |id: &str| id.chars().next().unwrap();
        let tasks = sample_triples(&clusters, 500, 3).unwrap();
        let mut odd_positions = [0usize; 3];
        for t in &tasks {
            let odd = cluster_of(&t.ids[t.odd_index]);
            let rest: Vec<char> = (0..3).filter(|&k| k != t.odd_index).map(|k| cluster_of(&t.ids[k])).collect();
            assert_eq!(rest[0], rest[1]);
            assert_ne!(rest[0], odd);
            assert_ne!(t.ids[0], t.ids[1]);
            odd_positions[t.odd_index] += 1;
        }
        assert!(odd_positions.iter().all(|&c| c > 100));
        assert_eq!(sample_triples(&[vec!["x".into()]], 1, 0), Err(SelectionError::NoValidTriples));
    }

    proptest! {
        #[test]
        fn extractive_order_invariant(seed in 0u64..1000, perm in Just(()).prop_perturb(|_, mut rng| {
            let mut v: Vec<usize> = (0..6).collect();
            for i in (1..6).rev() { v.swap(i, rng.random_range(0..=i)); }
            v
        })) {
            let members: Vec<KeyArgument> = (0..6).map(|k| arg(&format!("m{k}"), &format!("text {k}"))).collect();
            let mut e = EmbeddingStore::new(2).unwrap();
            let mut q = HashMap::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for m in &members {
                e.insert(m.id.clone(), vec![rng.random::<f64>() + 0.01, rng.random::<f64>()]).unwrap();
                q.insert(m.id.clone(), rng.random::<f64>());
            }
            let a: Vec<&KeyArgument> = members.iter().collect();
            let b: Vec<&KeyArgument> = perm.iter().map(|&k| &members[k]).collect();
            prop_assert_eq!(select_centroid(0, &a, &e).unwrap(), select_centroid(0, &b, &e).unwrap());
            prop_assert_eq!(select_quality(0, &a, &q).unwrap(), select_quality(0, &b, &q).unwrap());
            prop_assert_eq!(select_random(0, &a, seed).unwrap(), select_random(0, &b, seed).unwrap());
        }

        #[test]
        fn centroid_judge_equivariant(pts in prop::collection::vec((0.01f64..1.0, 0.01f64..1.0), 3)) {
            let mut e = EmbeddingStore::new(2).unwrap();
            for (k, (x, y)) in pts.iter().enumerate() {
                e.insert(format!("v{k}"), vec![*x, *y]).unwrap();
            }
            let ids = ["v0".to_string(), "v1".to_string(), "v2".to_string()];
            let mut j = CentroidDistanceJudge { embeddings: &e };
            let base = j.pick(&ids, &ids).unwrap();
            let rotated = [ids[1].clone(), ids[2].clone(), ids[0].clone()];
            let got = j.pick(&rotated, &rotated).unwrap();
            // skip exact ties, where the first maximal index wins in either order
            let d = |a: usize, b: usize| cosine_distance(e.get(&ids[a]).unwrap(), e.get(&ids[b]).unwrap()).unwrap();
            let sums = [d(0,1)+d(0,2), d(0,1)+d(1,2), d(0,2)+d(1,2)];
            let max = sums.iter().cloned().fold(f64::MIN, f64::max);
            prop_assume!(sums.iter().filter(|&&s| s == max).count() == 1);
            prop_assert_eq!(rotated[got].clone(), ids[base].clone());
        }

        #[test]
        fn scorer_monotone_under_self_reference(
            cand in "[a-e ]{1,20}",
            refs in prop::collection::vec("[a-e ]{1,20}", 1..4),
        ) {
            let s = TokenRecallScorer;
            let before = s.score(&cand, &refs).unwrap();
            let mut more = refs.clone();
            more.push(cand.clone());
            let after = s.score(&cand, &more).unwrap();
            prop_assert!(after >= before - 1e-12);
        }
    }
}
