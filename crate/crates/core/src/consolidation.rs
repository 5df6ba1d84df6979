//! Pairwise consolidation of key arguments.
//!
//! Every unordered argument pair gets two similarity scores (embedding cosine
//! and topic-vector similarity). Pairs are partially ordered by Pareto
//! dominance over the two scores; the order is split into vertex-disjoint
//! chains, and each chain is labeled by binary search: a pair judged similar
//! makes every more-dominant pair on the chain similar, a pair judged
//! dissimilar makes every less-dominant pair dissimilar.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EmbeddingStore, KeyArgument, TopicVector};
use crate::similarity::{cosine_similarity, topic_distance_similarity, SimilarityError};

/// Unordered argument pair, stored with `i < j`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairId {
    pub i: String,
    pub j: String,
}

impl PairId {
    pub fn new(a: impl Into<String>, b: impl Into<String>) -> Self {
        let (a, b) = (a.into(), b.into());
        if a <= b {
            Self { i: a, j: b }
        } else {
            Self { i: b, j: a }
        }
    }
}

impl std::fmt::Display for PairId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}|{}", self.i, self.j)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Similar,
    Dissimilar,
    Unlabeled,
}

impl Label {
    pub fn from_similar(similar: bool) -> Self {
        if similar {
            Label::Similar
        } else {
            Label::Dissimilar
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    HumanMajority,
    Propagated,
}

/// One row of the labels export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    #[serde(flatten)]
    pub pair: PairId,
    pub s1: f64,
    pub s2: f64,
    pub label: Label,
    pub source: Option<LabelSource>,
    pub votes: Vec<bool>,
}

impl PairRecord {
    pub fn unlabeled(pair: PairId, s1: f64, s2: f64) -> Self {
        Self { pair, s1, s2, label: Label::Unlabeled, source: None, votes: Vec::new() }
    }

    pub fn scores(&self) -> [f64; 2] {
        [self.s1, self.s2]
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConsolidationError {
    #[error("no embedding for argument {0}")]
    MissingEmbedding(String),
    #[error("no topic vector for argument {0}")]
    MissingTopicVector(String),
    #[error("similarity for {0}: {1}")]
    Similarity(PairId, SimilarityError),
    #[error("score of pair {0} is NaN")]
    NanScore(PairId),
    #[error("vote count {0} is not odd")]
    EvenVoteCount(usize),
    #[error("pair {0} is not on this path")]
    PairNotOnPath(PairId),
    #[error("pair {0} is not the pending query of its path")]
    NotCurrentQuery(PairId),
    #[error("unknown pair {0}")]
    UnknownPair(PairId),
}

/// Scores every unordered pair of `arguments`, ordered by `(i, j)`.
/// Topic vectors come from `topic_vectors`, falling back to the argument's own.
pub fn score_all_pairs(
    arguments: &[KeyArgument],
    embeddings: &EmbeddingStore,
    topic_vectors: &HashMap<String, TopicVector>,
) -> Result<Vec<PairRecord>, ConsolidationError> {
    let mut args: Vec<&KeyArgument> = arguments.iter().collect();
    args.sort_by(|a, b| a.id.cmp(&b.id));
    let resolved: Vec<(&str, &[f64], &TopicVector)> = args
        .iter()
        .map(|a| {
            let emb = embeddings
                .get(&a.id)
                .ok_or_else(|| ConsolidationError::MissingEmbedding(a.id.clone()))?;
            let tv = topic_vectors
                .get(&a.id)
                .or(a.topic_vector.as_ref())
                .ok_or_else(|| ConsolidationError::MissingTopicVector(a.id.clone()))?;
            Ok((a.id.as_str(), emb, tv))
        })
        .collect::<Result<_, ConsolidationError>>()?;
    let mut out = Vec::with_capacity(resolved.len() * resolved.len().saturating_sub(1) / 2);
    for (x, &(ida, ea, ta)) in resolved.iter().enumerate() {
        for &(idb, eb, tb) in &resolved[x + 1..] {
            let pair = PairId::new(ida, idb);
            let s1 = cosine_similarity(ea, eb).map_err(|e| ConsolidationError::Similarity(pair.clone(), e))?;
            let s2 = topic_distance_similarity(ta, tb).map_err(|e| ConsolidationError::Similarity(pair.clone(), e))?;
            out.push(PairRecord::unlabeled(pair, s1, s2));
        }
    }
    Ok(out)
}

/// `q` weakly dominates `p` in every score.
pub fn weakly_dominates(q: &[f64; 2], p: &[f64; 2]) -> bool {
    q[0] >= p[0] && q[1] >= p[1]
}

/// `q ≻ p`: weakly dominates with at least one strict improvement.
pub fn dominates(q: &[f64; 2], p: &[f64; 2]) -> bool {
    weakly_dominates(q, p) && (q[0] > p[0] || q[1] > p[1])
}

/// Pareto dependency graph over argument pairs. `edges` holds the transitive
/// reduction: `(p, q)` means `q` covers `p` (q is more similar).
#[derive(Debug, Clone, PartialEq)]
pub struct DependencyGraph {
    pairs: Vec<PairId>,
    scores: Vec<[f64; 2]>,
    edges: Vec<(usize, usize)>,
}

fn lex_cmp(a: &[f64; 2], b: &[f64; 2]) -> Ordering {
    a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1]))
}

/// Vertex indices sorted by score vector (then pair id), split into runs of
/// identical score vectors.
fn sorted_groups(pairs: &[PairId], scores: &[[f64; 2]], subset: &[usize]) -> Vec<Vec<usize>> {
    let mut order = subset.to_vec();
    order.sort_by(|&a, &b| lex_cmp(&scores[a], &scores[b]).then_with(|| pairs[a].cmp(&pairs[b])));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for v in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[v] => g.push(v),
            _ => groups.push(vec![v]),
        }
    }
    groups
}

pub fn build_dependency_graph(pairs: &[PairRecord]) -> Result<DependencyGraph, ConsolidationError> {
    for p in pairs {
        if p.s1.is_nan() || p.s2.is_nan() {
            return Err(ConsolidationError::NanScore(p.pair.clone()));
        }
    }
    let ids: Vec<PairId> = pairs.iter().map(|p| p.pair.clone()).collect();
    let scores: Vec<[f64; 2]> = pairs.iter().map(PairRecord::scores).collect();
    let all: Vec<usize> = (0..pairs.len()).collect();
    let groups = sorted_groups(&ids, &scores, &all);

    // In lexicographic order every r ≺ q precedes q, so a later group covers
    // `p` exactly when its s2 is below every s2 seen so far among p's
    // dominators.
    let mut edges = Vec::new();
    for (gi, group) in groups.iter().enumerate() {
        let p = scores[group[0]];
        let mut min_s2 = f64::INFINITY;
        for later in &groups[gi + 1..] {
            if min_s2 <= p[1] {
                break;
            }
            let q = scores[later[0]];
            if q[1] < p[1] {
                continue;
            }
            if q[1] < min_s2 {
                for &from in group {
                    for &to in later {
                        edges.push((from, to));
                    }
                }
                min_s2 = q[1];
            }
        }
    }
    edges.sort_unstable();
    Ok(DependencyGraph { pairs: ids, scores, edges })
}

impl DependencyGraph {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pair(&self, v: usize) -> &PairId {
        &self.pairs[v]
    }

    pub fn scores(&self, v: usize) -> [f64; 2] {
        self.scores[v]
    }

    /// Covering edges `(lower, higher)`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// `q ≻ p` in the underlying order.
    pub fn precedes(&self, p: usize, q: usize) -> bool {
        dominates(&self.scores[q], &self.scores[p])
    }
}

/// Fenwick tree over s2 ranks answering prefix maxima of `(chain length,
/// earliest position)`.
struct PrefixMax {
    tree: Vec<Option<(usize, usize)>>,
}

impl PrefixMax {
    fn new(n: usize) -> Self {
        Self { tree: vec![None; n + 1] }
    }

    fn better(a: (usize, usize), b: (usize, usize)) -> bool {
        a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
    }

    fn update(&mut self, rank: usize, value: (usize, usize)) {
        let mut i = rank + 1;
        while i < self.tree.len() {
            match self.tree[i] {
                Some(cur) if !Self::better(value, cur) => {}
                _ => self.tree[i] = Some(value),
            }
            i += i & i.wrapping_neg();
        }
    }

    fn query(&self, rank: usize) -> Option<(usize, usize)> {
        let mut i = rank + 1;
        let mut best: Option<(usize, usize)> = None;
        while i > 0 {
            if let Some(v) = self.tree[i] {
                if best.is_none_or(|b| Self::better(v, b)) {
                    best = Some(v);
                }
            }
            i -= i & i.wrapping_neg();
        }
        best
    }
}

/// Longest chain (ascending) among `subset`, deterministic.
fn longest_chain(g: &DependencyGraph, subset: &[usize], s2_rank: &[usize], n_ranks: usize) -> Vec<usize> {
    let groups = sorted_groups(&g.pairs, &g.scores, subset);
    let flat: Vec<usize> = groups.iter().flatten().copied().collect();
    let mut pos_of = HashMap::with_capacity(flat.len());
    for (pos, &v) in flat.iter().enumerate() {
        pos_of.insert(v, pos);
    }
    let mut len = vec![0usize; flat.len()];
    let mut pred: Vec<Option<usize>> = vec![None; flat.len()];
    let mut fenwick = PrefixMax::new(n_ranks);
    for group in &groups {
        // members of one group are mutually incomparable: query all, then insert
        for &v in group {
            let pos = pos_of[&v];
            match fenwick.query(s2_rank[v]) {
                Some((l, from)) => {
                    len[pos] = l + 1;
                    pred[pos] = Some(from);
                }
                None => len[pos] = 1,
            }
        }
        for &v in group {
            let pos = pos_of[&v];
            fenwick.update(s2_rank[v], (len[pos], pos));
        }
    }
    let Some(mut end) = (0..flat.len()).max_by(|&a, &b| len[a].cmp(&len[b]).then(b.cmp(&a))) else {
        return Vec::new();
    };
    let mut chain = vec![flat[end]];
    while let Some(p) = pred[end] {
        chain.push(flat[p]);
        end = p;
    }
    chain.reverse();
    chain
}

/// A chain of pairs in ascending dominance order, with the binary-search
/// frontier: indices `<= dissimilar_upto` are dissimilar, indices
/// `>= similar_from` are similar, everything between is unlabeled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainPath {
    pub vertices: Vec<usize>,
    pub pairs: Vec<PairId>,
    pub dissimilar_upto: Option<usize>,
    pub similar_from: Option<usize>,
}

impl ChainPath {
    pub fn new(vertices: Vec<usize>, pairs: Vec<PairId>) -> Self {
        Self { vertices, pairs, dissimilar_upto: None, similar_from: None }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Inclusive bounds of the unlabeled segment, if any.
    pub fn unlabeled_range(&self) -> Option<(usize, usize)> {
        let lo = self.dissimilar_upto.map_or(0, |d| d + 1);
        let hi_excl = self.similar_from.unwrap_or(self.pairs.len());
        (lo < hi_excl).then(|| (lo, hi_excl - 1))
    }

    pub fn position(&self, pair: &PairId) -> Option<usize> {
        self.pairs.iter().position(|p| p == pair)
    }
}

/// Splits the dependency order into vertex-disjoint chains by repeatedly
/// peeling a longest chain from the remaining pairs.
pub fn decompose_paths(g: &DependencyGraph) -> Vec<ChainPath> {
    let mut s2_values: Vec<f64> = g.scores.iter().map(|s| s[1]).collect();
    s2_values.sort_by(f64::total_cmp);
    s2_values.dedup();
    let s2_rank: Vec<usize> = g
        .scores
        .iter()
        .map(|s| s2_values.partition_point(|x| x.total_cmp(&s[1]) == Ordering::Less))
        .collect();

    let mut remaining: Vec<usize> = (0..g.len()).collect();
    let mut paths = Vec::new();
    while !remaining.is_empty() {
        let chain = longest_chain(g, &remaining, &s2_rank, s2_values.len());
        let taken: BTreeSet<usize> = chain.iter().copied().collect();
        remaining.retain(|v| !taken.contains(v));
        let pairs = chain.iter().map(|&v| g.pairs[v].clone()).collect();
        paths.push(ChainPath::new(chain, pairs));
    }
    paths
}

/// Midpoint of the unlabeled segment, rounding up; `None` once the path is
/// fully labeled.
pub fn next_query(path: &ChainPath) -> Option<(usize, &PairId)> {
    let (lo, hi) = path.unlabeled_range()?;
    let mid = (lo + hi).div_ceil(2);
    Some((mid, &path.pairs[mid]))
}

/// Majority over an odd number of votes.
pub fn majority(votes: &[bool]) -> Result<Label, ConsolidationError> {
    if votes.len().is_multiple_of(2) {
        return Err(ConsolidationError::EvenVoteCount(votes.len()));
    }
    let yes = votes.iter().filter(|&&v| v).count();
    Ok(Label::from_similar(2 * yes > votes.len()))
}

pub fn submit_votes(pair: &mut PairRecord, votes: &[bool]) -> Result<Label, ConsolidationError> {
    let label = majority(votes)?;
    pair.label = label;
    pair.source = Some(LabelSource::HumanMajority);
    pair.votes = votes.to_vec();
    Ok(label)
}

/// Applies a human label at `pair` and returns the pairs whose label follows
/// from it: everything above a similar pair, everything below a dissimilar
/// one, limited to the still unlabeled segment.
pub fn propagate(path: &mut ChainPath, pair: &PairId, label: Label) -> Result<Vec<PairId>, ConsolidationError> {
    let pos = path.position(pair).ok_or_else(|| ConsolidationError::PairNotOnPath(pair.clone()))?;
    let Some((lo, hi)) = path.unlabeled_range() else {
        return Ok(Vec::new());
    };
    if pos < lo || pos > hi {
        return Ok(Vec::new());
    }
    let out = match label {
        Label::Similar => {
            path.similar_from = Some(pos);
            path.pairs[pos + 1..=hi].to_vec()
        }
        Label::Dissimilar => {
            path.dissimilar_upto = Some(pos);
            path.pairs[lo..pos].to_vec()
        }
        Label::Unlabeled => Vec::new(),
    };
    Ok(out)
}

/// `3 × triangles / connected triples` of the similar-pair graph; 0 when the
/// graph has no connected triple.
pub fn transitivity<'a>(similar_edges: impl IntoIterator<Item = (&'a str, &'a str)>) -> f64 {
    let mut adj: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for (a, b) in similar_edges {
        if a == b {
            continue;
        }
        adj.entry(a).or_default().insert(b);
        adj.entry(b).or_default().insert(a);
    }
    let triples: u64 = adj
        .values()
        .map(|n| {
            let d = n.len() as u64;
            d * d.saturating_sub(1) / 2
        })
        .sum();
    if triples == 0 {
        return 0.0;
    }
    let mut triangles = 0u64;
    for (&u, nu) in &adj {
        for &v in nu.range::<&str, _>((std::ops::Bound::Excluded(u), std::ops::Bound::Unbounded)) {
            let nv = &adj[v];
            triangles += nu
                .range::<&str, _>((std::ops::Bound::Excluded(v), std::ops::Bound::Unbounded))
                .filter(|w| nv.contains(*w))
                .count() as u64;
        }
    }
    3.0 * triangles as f64 / triples as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsolidationStats {
    pub total_pairs: usize,
    pub human_queries: usize,
    pub propagated: usize,
    pub delta: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubmitOutcome {
    pub label: Label,
    pub propagated: Vec<PairId>,
}

/// Multi-path labeling state: one binary search per chain, each chain
/// advancing independently.
#[derive(Debug, Clone)]
pub struct MultiPathScheduler {
    records: Vec<PairRecord>,
    index: HashMap<PairId, usize>,
    paths: Vec<ChainPath>,
    path_of: Vec<usize>,
    human_queries: usize,
}

impl MultiPathScheduler {
    pub fn new(records: Vec<PairRecord>) -> Result<Self, ConsolidationError> {
        let graph = build_dependency_graph(&records)?;
        let paths = decompose_paths(&graph);
        let mut path_of = vec![usize::MAX; records.len()];
        for (pi, path) in paths.iter().enumerate() {
            for &v in &path.vertices {
                path_of[v] = pi;
            }
        }
        let index = records.iter().enumerate().map(|(k, r)| (r.pair.clone(), k)).collect();
        Ok(Self { records, index, paths, path_of, human_queries: 0 })
    }

    pub fn paths(&self) -> &[ChainPath] {
        &self.paths
    }

    pub fn records(&self) -> &[PairRecord] {
        &self.records
    }

    pub fn record(&self, pair: &PairId) -> Option<&PairRecord> {
        self.index.get(pair).map(|&k| &self.records[k])
    }

    pub fn path_of(&self, pair: &PairId) -> Option<usize> {
        self.index.get(pair).map(|&k| self.path_of[k])
    }

    pub fn next_query(&self, path: usize) -> Option<&PairId> {
        self.paths.get(path).and_then(next_query).map(|(_, p)| p)
    }

    /// Current query of every path that still has unlabeled pairs.
    pub fn pending(&self) -> Vec<(usize, PairId)> {
        self.paths
            .iter()
            .enumerate()
            .filter_map(|(k, p)| next_query(p).map(|(_, pair)| (k, pair.clone())))
            .collect()
    }

    pub fn is_done(&self) -> bool {
        self.paths.iter().all(|p| p.unlabeled_range().is_none())
    }

    pub fn human_queries(&self) -> usize {
        self.human_queries
    }

    /// Records the votes for a path's pending query and propagates.
    pub fn submit(&mut self, pair: &PairId, votes: &[bool]) -> Result<SubmitOutcome, ConsolidationError> {
        let &k = self.index.get(pair).ok_or_else(|| ConsolidationError::UnknownPair(pair.clone()))?;
        let path_id = self.path_of[k];
        if self.paths[path_id].unlabeled_range().is_none() || next_query(&self.paths[path_id]).map(|(_, p)| p) != Some(pair) {
            return Err(ConsolidationError::NotCurrentQuery(pair.clone()));
        }
        let label = submit_votes(&mut self.records[k], votes)?;
        self.human_queries += 1;
        let propagated = propagate(&mut self.paths[path_id], pair, label)?;
        for p in &propagated {
            let r = &mut self.records[self.index[p]];
            if r.label == Label::Unlabeled {
                r.label = label;
                r.source = Some(LabelSource::Propagated);
            }
        }
        Ok(SubmitOutcome { label, propagated })
    }

    pub fn stats(&self) -> ConsolidationStats {
        let total = self.records.len();
        let propagated = self
            .records
            .iter()
            .filter(|r| r.source == Some(LabelSource::Propagated))
            .count();
        let tau = transitivity(
            self.records
                .iter()
                .filter(|r| r.label == Label::Similar)
                .map(|r| (r.pair.i.as_str(), r.pair.j.as_str())),
        );
        ConsolidationStats {
            total_pairs: total,
            human_queries: self.human_queries,
            propagated,
            delta: if total == 0 { 0.0 } else { 1.0 - self.human_queries as f64 / total as f64 },
            tau,
        }
    }

    pub fn into_records(self) -> Vec<PairRecord> {
        self.records
    }

    /// Drives every path to completion, asking `oracle` for the votes of each
    /// query. Paths advance in rounds, one query per active path per round.
    pub fn run<F>(&mut self, mut oracle: F) -> Result<(), ConsolidationError>
    where
        F: FnMut(&PairRecord) -> Vec<bool>,
    {
        loop {
            let pending = self.pending();
            if pending.is_empty() {
                return Ok(());
            }
            for (_, pair) in pending {
                let votes = oracle(&self.records[self.index[&pair]]);
                self.submit(&pair, &votes)?;
            }
        }
    }
}
