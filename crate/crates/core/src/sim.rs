//! Synthetic corpora with planted clusters, simulated annotators, and the
//! driver that runs them against the engine.

use std::collections::{BTreeMap, HashMap};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consolidation::{Label, PairId, PairRecord};
use crate::engine::{ArgumentEmbedder, Engine, EngineError, Phase, RunInputs, TaskAnswer, TaskKind, TaskPayload};
use crate::model::{EmbeddingStore, KeyArgument, Opinion, Stance, TopicProfile};
use crate::sampling::{AnnotationAction, SkipReason};
use crate::util::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub corpus_id: String,
    pub opinions: usize,
    pub clusters: usize,
    pub dim: usize,
    /// Standard deviation of per-coordinate embedding noise.
    pub noise: f64,
    /// Extra topics beyond one per cluster; flagged as duplicates.
    pub duplicate_topics: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            corpus_id: "synthetic".into(),
            opinions: 1000,
            clusters: 12,
            dim: 32,
            noise: 0.08,
            duplicate_topics: 2,
            seed: 0,
        }
    }
}

/// Planted cluster of every opinion and topic.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub opinion_cluster: BTreeMap<String, usize>,
    pub topic_cluster: BTreeMap<String, usize>,
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub opinions: Vec<Opinion>,
    pub embeddings: EmbeddingStore,
    pub quality: HashMap<String, f64>,
    pub topics: Vec<TopicProfile>,
    pub truth: GroundTruth,
    pub vocab: Vec<Vec<String>>,
    centers: Vec<Vec<f64>>,
}

const ONSETS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t"];
const NUCLEI: [&str; 5] = ["a", "e", "i", "o", "u"];
const FILLER: [&str; 10] =
    ["people", "measure", "think", "because", "would", "should", "really", "option", "better", "government"];

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.random_range(2..4);
    (0..syllables)
        .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), NUCLEI.choose(rng).unwrap()))
        .collect()
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

impl SyntheticWorld {
    pub fn generate(config: WorldConfig) -> Self {
        assert!(config.clusters > 0 && config.dim > 1, "need clusters and dimensions");
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let centers: Vec<Vec<f64>> = (0..config.clusters).map(|_| unit_gaussian(&mut rng, config.dim)).collect();
        let vocab: Vec<Vec<String>> =
            (0..config.clusters).map(|c| (0..8).map(|j| format!("{}{c}{j}", pseudo_word(&mut rng))).collect()).collect();
        let mut opinions = Vec::with_capacity(config.opinions);
        let mut embeddings = EmbeddingStore::new(config.dim).expect("dim > 0");
        let mut quality = HashMap::new();
        let mut truth = GroundTruth::default();
        let width = config.opinions.to_string().len().max(4);
        for i in 0..config.opinions {
            let id = format!("o{i:0width$}");
            let c = rng.random_range(0..config.clusters);
            let v: Vec<f64> = centers[c]
                .iter()
                .map(|x| f64::from((x + config.noise * rng.sample::<f64, _>(StandardNormal)) as f32))
                .collect();
            let majority = if c % 2 == 0 { Stance::Pro } else { Stance::Con };
            let stance = if rng.random::<f64>() < 0.1 { flip(majority) } else { majority };
            let words: Vec<&String> = vocab[c].choose_multiple(&mut rng, 3).collect();
            let text = format!(
                "I {} {} {} {} {}.",
                FILLER.choose(&mut rng).unwrap(),
                words[0],
                words[1],
                FILLER.choose(&mut rng).unwrap(),
                words[2]
            );
            embeddings.insert(id.clone(), v).expect("fresh id");
            quality.insert(id.clone(), rng.random::<f64>());
            truth.opinion_cluster.insert(id.clone(), c);
            opinions.push(Opinion {
                id,
                corpus_id: config.corpus_id.clone(),
                text,
                original_text: None,
                stance,
                quality: None,
            });
        }
        let mut topics = Vec::new();
        for t in 0..config.clusters + config.duplicate_topics {
            let c = t % config.clusters;
            let topic_id = format!("topic{t:02}");
            let clarity: Vec<u8> = (0..3).map(|_| rng.random_range(3..=5)).collect();
            truth.topic_cluster.insert(topic_id.clone(), c);
            topics.push(TopicProfile {
                topic_id,
                top_words: vocab[c][..5].to_vec(),
                clarity_ratings: clarity,
                duplicate: t >= config.clusters,
                kept: false,
            });
        }
        Self { config, opinions, embeddings, quality, topics, truth, vocab, centers }
    }

    pub fn inputs(&self) -> RunInputs {
        RunInputs {
            opinions: self.opinions.clone(),
            embeddings: self.embeddings.clone(),
            quality: self.quality.clone(),
            topics: self.topics.clone(),
        }
    }

    pub fn embedder(&self) -> WorldEmbedder {
        WorldEmbedder {
            centers: self.centers.clone(),
            truth: self.truth.opinion_cluster.clone(),
            noise: self.config.noise,
            seed: self.config.seed,
        }
    }
}

fn flip(s: Stance) -> Stance {
    match s {
        Stance::Pro => Stance::Con,
        Stance::Con => Stance::Pro,
    }
}

/// Places a new argument near its source opinion's planted center. Vectors
/// are rounded to `f32` like the on-disk format.
#[derive(Debug, Clone)]
pub struct WorldEmbedder {
    centers: Vec<Vec<f64>>,
    truth: BTreeMap<String, usize>,
    noise: f64,
    seed: u64,
}

impl ArgumentEmbedder for WorldEmbedder {
    fn embed(&self, argument: &KeyArgument) -> Option<Vec<f64>> {
        let c = *self.truth.get(&argument.source_opinion_id)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &format!("embed/{}", argument.id)));
        Some(
            self.centers[c]
                .iter()
                .map(|x| f64::from((x + self.noise * rng.sample::<f64, _>(StandardNormal)) as f32))
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BehaviorRates {
    pub new: f64,
    pub skip: f64,
    pub already: f64,
}

impl Default for BehaviorRates {
    fn default() -> Self {
        Self { new: 0.5, skip: 0.3, already: 0.2 }
    }
}

/// How a simulated annotator decides pair similarity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SimilarityTruth {
    /// Same planted cluster.
    Planted,
    /// Both scores at or above their thresholds; monotone in each score.
    Threshold { s1: f64, s2: f64 },
}

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("behavior rates must be non-negative and sum to 1")]
    BadRates,
    #[error("noise must be in [0, 0.5)")]
    BadNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedAnnotator {
    pub seed: u64,
    pub epsilon: f64,
    pub rates: BehaviorRates,
    pub similarity: SimilarityTruth,
    /// Chance that a new argument copies the opinion verbatim.
    pub verbatim: f64,
}

impl Default for SimulatedAnnotator {
    fn default() -> Self {
        Self {
            seed: 0,
            epsilon: 0.05,
            rates: BehaviorRates::default(),
            similarity: SimilarityTruth::Planted,
            verbatim: 0.25,
        }
    }
}

impl SimulatedAnnotator {
    pub fn validate(&self) -> Result<(), SimError> {
        let r = self.rates;
        if [r.new, r.skip, r.already].iter().any(|x| !(0.0..=1.0).contains(x)) || (r.new + r.skip + r.already - 1.0).abs() > 1e-9 {
            return Err(SimError::BadRates);
        }
        if !(0.0..0.5).contains(&self.epsilon) {
            return Err(SimError::BadNoise);
        }
        Ok(())
    }

    fn rng(&self, who: &str, item: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &format!("{who}/{item}")))
    }

    fn noisy(&self, rng: &mut ChaCha8Rng, truth: bool) -> bool {
        if rng.random::<f64>() < self.epsilon {
            !truth
        } else {
            truth
        }
    }

    /// Phase 1 decision for one served opinion. `session_arguments` holds
    /// the session's arguments with their planted clusters.
    pub fn phase1(
        &self,
        who: &str,
        opinion: &Opinion,
        cluster: usize,
        session_arguments: &[(String, usize)],
        vocab: &[String],
    ) -> AnnotationAction {
        let mut rng = self.rng(who, &opinion.id);
        let u = rng.random::<f64>();
        if u < self.rates.skip {
            let reason = if rng.random::<f64>() < 0.9 { SkipReason::NoArgument } else { SkipReason::BadTranslation };
            return AnnotationAction::Skip { reason };
        }
        if u < self.rates.skip + self.rates.already {
            if let Some((id, _)) = session_arguments.iter().find(|(_, c)| *c == cluster) {
                return AnnotationAction::Already { argument_id: id.clone() };
            }
        }
        let text = if rng.random::<f64>() < self.verbatim {
            opinion.text.clone()
        } else {
            let words: Vec<&String> = vocab.choose_multiple(&mut rng, 3).collect();
            format!("{} {} {}", words[0], words[1], words[2])
        };
        AnnotationAction::NewArgument { text, stance: None }
    }

    pub fn topics(&self, who: &str, argument_id: &str, cluster: usize, topic_clusters: &[usize]) -> Vec<bool> {
        let mut rng = self.rng(who, argument_id);
        topic_clusters.iter().map(|&t| self.noisy(&mut rng, t == cluster)).collect()
    }

    pub fn similar(&self, who: &str, pair: &PairId, same_cluster: bool, s1: f64, s2: f64) -> bool {
        let truth = match self.similarity {
            SimilarityTruth::Planted => same_cluster,
            SimilarityTruth::Threshold { s1: t1, s2: t2 } => s1 >= t1 && s2 >= t2,
        };
        let mut rng = self.rng(who, &pair.to_string());
        self.noisy(&mut rng, truth)
    }

    pub fn matches(&self, who: &str, task_id: &str, truth: bool) -> bool {
        let mut rng = self.rng(who, task_id);
        self.noisy(&mut rng, truth)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriverConfig {
    /// Workers answering topic, pair and match tasks.
    pub crowd: usize,
    pub annotator: SimulatedAnnotator,
}

impl Default for DriverConfig {
    fn default() -> Self {
        Self { crowd: 9, annotator: SimulatedAnnotator::default() }
    }
}

pub fn phase1_annotator(k: usize) -> String {
    format!("ann{:02}", k + 1)
}

pub fn crowd_worker(k: usize) -> String {
    format!("w{:02}", k + 1)
}

/// Cluster of an argument via its source opinion.
fn argument_cluster(engine: &Engine, truth: &GroundTruth, id: &str) -> usize {
    let source = &engine.argument(id).expect("known argument").source_opinion_id;
    truth.opinion_cluster[source]
}

/// Most common planted cluster among `items`, which are argument or
/// opinion ids.
fn dominant_cluster(engine: &Engine, truth: &GroundTruth, items: &[String]) -> Option<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for id in items {
        let c = match truth.opinion_cluster.get(id) {
            Some(&c) => c,
            None => argument_cluster(engine, truth, id),
        };
        *counts.entry(c).or_default() += 1;
    }
    counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map(|(c, _)| c)
}

/// Drives every phase to completion with simulated annotators. Safe to call
/// again on an engine reopened from a partial log: sessions are reused and
/// held leases are answered first.
pub fn drive(engine: &mut Engine, world: &SyntheticWorld, driver: &DriverConfig) -> Result<(), EngineError> {
    let sim = &driver.annotator;
    let truth = &world.truth;
    for k in 0..engine.config().annotators {
        if engine.phase() != Phase::Phase1 {
            break;
        }
        let who = phase1_annotator(k);
        let session_id = engine.create_session(&who)?;
        while let Some(env) = engine.next_opinion(&session_id)? {
            let TaskPayload::Phase1Opinion { opinion_id, arguments, .. } = env.payload else {
                unreachable!("session tasks are opinions");
            };
            let opinion = engine.opinion(&opinion_id).expect("served opinion").clone();
            let c = truth.opinion_cluster[&opinion_id];
            let args: Vec<(String, usize)> =
                arguments.iter().map(|a| (a.id.clone(), argument_cluster(engine, truth, &a.id))).collect();
            let action = sim.phase1(&who, &opinion, c, &args, &world.vocab[c]);
            engine.submit_action(&session_id, action)?;
        }
    }
    let crowd = driver.crowd.max(1);
    loop {
        let kind = match engine.phase() {
            Phase::Phase1 | Phase::Done => return Ok(()),
            Phase::Topics => TaskKind::TopicAssign,
            Phase::Consolidation => TaskKind::PairSimilarity,
            Phase::Matching => TaskKind::MatchEval,
        };
        let last = engine
            .last_served(kind)
            .and_then(|w| (0..crowd).find(|&k| crowd_worker(k) == w));
        let order: Vec<usize> = match last {
            Some(k) if engine.holds(kind, &crowd_worker(k)) => (0..crowd).map(|o| (k + o) % crowd).collect(),
            Some(k) => (1..=crowd).map(|o| (k + o) % crowd).collect(),
            None => (0..crowd).collect(),
        };
        let mut served = None;
        for k in order {
            let who = crowd_worker(k);
            if let Some(env) = engine.next_task(kind, &who)? {
                served = Some((who, env));
                break;
            }
        }
        let Some((who, env)) = served else {
            return Err(EngineError::InvalidConfig(format!("crowd of {crowd} cannot cover {kind:?} tasks")));
        };
        let answer = match &env.payload {
            TaskPayload::TopicAssign { argument_id, topics, .. } => {
                let c = argument_cluster(engine, truth, argument_id);
                let tc: Vec<usize> = topics.iter().map(|t| truth.topic_cluster[&t.topic_id]).collect();
                TaskAnswer::Topics(sim.topics(&who, argument_id, c, &tc))
            }
            TaskPayload::PairSimilarity { pair, .. } => {
                let same = argument_cluster(engine, truth, &pair.i) == argument_cluster(engine, truth, &pair.j);
                let rec = engine.scheduler().and_then(|s| s.record(pair)).expect("pair is scored");
                TaskAnswer::Similar(sim.similar(&who, pair, same, rec.s1, rec.s2))
            }
            TaskPayload::MatchEval { opinion_id, sources, .. } => {
                let t = dominant_cluster(engine, truth, sources) == Some(truth.opinion_cluster[opinion_id]);
                TaskAnswer::Match(sim.matches(&who, &env.task_id, t))
            }
            TaskPayload::Phase1Opinion { .. } => unreachable!("crowd tasks only"),
        };
        engine.answer_task(&env.task_id, &who, answer)?;
    }
}

/// Parameters of the two-component beta mixture for pair scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaMixture {
    pub same_s1: (f64, f64),
    pub same_s2: (f64, f64),
    pub other_s1: (f64, f64),
    pub other_s2: (f64, f64),
}

impl Default for BetaMixture {
    fn default() -> Self {
        Self { same_s1: (8.0, 3.0), same_s2: (5.0, 3.0), other_s1: (3.0, 5.0), other_s2: (2.0, 6.0) }
    }
}

/// All pairs over `n` arguments in `k` planted clusters, with scores drawn
/// from the mixture. Returns the records and the planted label of each.
pub fn beta_mixture_pairs(
    n: usize,
    k: usize,
    mixture: &BetaMixture,
    seed: u64,
) -> (Vec<PairRecord>, HashMap<PairId, Label>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = n.to_string().len();
    let mut cluster: Vec<usize> = (0..n).map(|i| i % k.max(1)).collect();
    cluster.shuffle(&mut rng);
    let beta = |(a, b): (f64, f64)| Beta::new(a, b).expect("positive shape");
    let (ss1, ss2, os1, os2) = (beta(mixture.same_s1), beta(mixture.same_s2), beta(mixture.other_s1), beta(mixture.other_s2));
    let mut records = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    let mut truth = HashMap::new();
    for a in 0..n {
        for b in a + 1..n {
            let pair = PairId::new(format!("a{a:0width$}"), format!("a{b:0width$}"));
            let same = cluster[a] == cluster[b];
            let (s1, s2) = if same {
                (ss1.sample(&mut rng), ss2.sample(&mut rng))
            } else {
                (os1.sample(&mut rng), os2.sample(&mut rng))
            };
            truth.insert(pair.clone(), Label::from_similar(same));
            records.push(PairRecord::unlabeled(pair, s1, s2));
        }
    }
    (records, truth)
}
