//! Domain types shared by every phase: opinions, key arguments, embeddings,
//! topic profiles and topic vectors, plus corpus ingestion.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stance {
    Pro,
    Con,
}

impl Stance {
    pub fn as_str(self) -> &'static str {
        match self {
            Stance::Pro => "pro",
            Stance::Con => "con",
        }
    }
}

impl fmt::Display for Stance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pro" => Ok(Stance::Pro),
            "con" => Ok(Stance::Con),
            other => Err(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Opinion {
    pub id: String,
    pub corpus_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_text: Option<String>,
    pub stance: Stance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<f64>,
}

/// Per-argument topic assignment: how many annotators tagged each
/// shortlisted topic.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TopicVector {
    pub counts: Vec<u32>,
}

impl TopicVector {
    pub fn new(counts: Vec<u32>) -> Self {
        Self { counts }
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyArgument {
    pub id: String,
    pub corpus_id: String,
    pub text: String,
    pub stance: Stance,
    pub annotator_id: String,
    pub source_opinion_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic_vector: Option<TopicVector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicProfile {
    pub topic_id: String,
    pub top_words: Vec<String>,
    #[serde(default)]
    pub clarity_ratings: Vec<u8>,
    /// Curator flag: this topic repeats an aspect already covered by a more
    /// frequent topic.
    #[serde(default)]
    pub duplicate: bool,
    #[serde(default)]
    pub kept: bool,
}

impl TopicProfile {
    pub fn mean_clarity(&self) -> Option<f64> {
        if self.clarity_ratings.is_empty() {
            return None;
        }
        let sum: u32 = self.clarity_ratings.iter().map(|&r| u32::from(r)).sum();
        Some(f64::from(sum) / self.clarity_ratings.len() as f64)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EmbeddingError {
    #[error("embedding dimension must be positive")]
    ZeroDimension,
    #[error("vector for {id} has length {got}, expected {expected}")]
    DimensionMismatch { id: String, got: usize, expected: usize },
    #[error("duplicate embedding id {0}")]
    DuplicateId(String),
    #[error("no embedding for {0}")]
    Missing(String),
}

/// Fixed-dimension vectors keyed by item id (opinions and arguments share the
/// namespace).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingStore {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Result<Self, EmbeddingError> {
        if dim == 0 {
            return Err(EmbeddingError::ZeroDimension);
        }
        Ok(Self { dim, vectors: HashMap::new() })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: Vec<f64>) -> Result<(), EmbeddingError> {
        let id = id.into();
        if vector.len() != self.dim {
            return Err(EmbeddingError::DimensionMismatch { id, got: vector.len(), expected: self.dim });
        }
        if self.vectors.contains_key(&id) {
            return Err(EmbeddingError::DuplicateId(id));
        }
        self.vectors.insert(id, vector);
        Ok(())
    }

    /// Inserts or replaces; used when an argument inherits a vector.
    pub fn upsert(&mut self, id: impl Into<String>, vector: Vec<f64>) -> Result<(), EmbeddingError> {
        let id = id.into();
        if vector.len() != self.dim {
            return Err(EmbeddingError::DimensionMismatch { id, got: vector.len(), expected: self.dim });
        }
        self.vectors.insert(id, vector);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.vectors.get(id).map(Vec::as_slice)
    }

    pub fn require(&self, id: &str) -> Result<&[f64], EmbeddingError> {
        self.get(id).ok_or_else(|| EmbeddingError::Missing(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.vectors.contains_key(id)
    }
}

/// One input row before validation. Stance is kept as a raw string so an
/// invalid label can be reported with its row index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawOpinionRow {
    pub id: String,
    pub corpus_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_text: Option<String>,
    pub stance: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IngestErrorKind {
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("empty text")]
    EmptyText,
    #[error("unknown stance {0:?}")]
    UnknownStance(String),
    #[error("empty id")]
    EmptyId,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("row {row}: {kind}")]
pub struct IngestError {
    pub row: usize,
    pub kind: IngestErrorKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub count: usize,
    pub pro: usize,
    pub con: usize,
    pub pro_ratio: f64,
    pub con_ratio: f64,
}

impl CorpusStats {
    fn from_counts(pro: usize, con: usize) -> Self {
        let count = pro + con;
        let (pro_ratio, con_ratio) = if count == 0 {
            (0.0, 0.0)
        } else {
            (pro as f64 / count as f64, con as f64 / count as f64)
        };
        Self { count, pro, con, pro_ratio, con_ratio }
    }
}

/// A validated set of opinions. Ids are unique within each `corpus_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    opinions: Vec<Opinion>,
    index: HashMap<(String, String), usize>,
    stats: BTreeMap<String, CorpusStats>,
}

pub fn ingest_corpus(rows: &[RawOpinionRow]) -> Result<Corpus, IngestError> {
    let mut opinions = Vec::with_capacity(rows.len());
    let mut index = HashMap::with_capacity(rows.len());
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (row, raw) in rows.iter().enumerate() {
        let fail = |kind| IngestError { row, kind };
        if raw.id.trim().is_empty() {
            return Err(fail(IngestErrorKind::EmptyId));
        }
        if raw.text.trim().is_empty() {
            return Err(fail(IngestErrorKind::EmptyText));
        }
        let stance: Stance = raw
            .stance
            .parse()
            .map_err(|s| fail(IngestErrorKind::UnknownStance(s)))?;
        let key = (raw.corpus_id.clone(), raw.id.clone());
        if index.contains_key(&key) {
            return Err(fail(IngestErrorKind::DuplicateId(raw.id.clone())));
        }
        index.insert(key, opinions.len());
        let entry = counts.entry(raw.corpus_id.clone()).or_default();
        match stance {
            Stance::Pro => entry.0 += 1,
            Stance::Con => entry.1 += 1,
        }
        opinions.push(Opinion {
            id: raw.id.clone(),
            corpus_id: raw.corpus_id.clone(),
            text: raw.text.clone(),
            original_text: raw.original_text.clone(),
            stance,
            quality: None,
        });
    }
    let stats = counts
        .into_iter()
        .map(|(corpus, (pro, con))| (corpus, CorpusStats::from_counts(pro, con)))
        .collect();
    Ok(Corpus { opinions, index, stats })
}

impl Corpus {
    pub fn opinions(&self) -> &[Opinion] {
        &self.opinions
    }

    pub fn len(&self) -> usize {
        self.opinions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opinions.is_empty()
    }

    pub fn get(&self, corpus_id: &str, id: &str) -> Option<&Opinion> {
        self.index
            .get(&(corpus_id.to_string(), id.to_string()))
            .map(|&i| &self.opinions[i])
    }

    pub fn corpus_ids(&self) -> impl Iterator<Item = &str> {
        self.stats.keys().map(String::as_str)
    }

    pub fn stats(&self, corpus_id: &str) -> Option<&CorpusStats> {
        self.stats.get(corpus_id)
    }

    /// Stats over every row regardless of corpus.
    pub fn total_stats(&self) -> CorpusStats {
        let pro = self.stats.values().map(|s| s.pro).sum();
        let con = self.stats.values().map(|s| s.con).sum();
        CorpusStats::from_counts(pro, con)
    }

    pub fn of_corpus<'a>(&'a self, corpus_id: &'a str) -> impl Iterator<Item = &'a Opinion> + 'a {
        self.opinions.iter().filter(move |o| o.corpus_id == corpus_id)
    }

    /// Attaches quality scores by opinion id; ids not in the map keep `None`.
    pub fn attach_quality(&mut self, quality: &HashMap<String, f64>) {
        for o in &mut self.opinions {
            if let Some(&q) = quality.get(&o.id) {
                o.quality = Some(q);
            }
        }
    }
}
