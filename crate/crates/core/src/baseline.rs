//! Fully automatic comparison method: k-means over opinion embeddings, the
//! most central opinion of each group as its key point, and a cosine
//! threshold for mapping opinions to key points.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::kmeans;
use crate::model::EmbeddingStore;
use crate::similarity::{cosine_similarity, SimilarityError};

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("no opinions")]
    Empty,
    #[error("no embedding for {0}")]
    MissingEmbedding(String),
    #[error("similarity: {0}")]
    Similarity(#[from] SimilarityError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    /// Opinion ids serving as key points.
    pub key_points: Vec<String>,
    /// Opinion id to key point index, for opinions above the threshold.
    pub mapping: BTreeMap<String, usize>,
}

/// `opinion_ids` are sorted internally; `k` is clamped to `1..=n`.
pub fn automated_baseline(
    opinion_ids: &[String],
    embeddings: &EmbeddingStore,
    k: usize,
    threshold: f64,
    seed: u64,
) -> Result<BaselineResult, BaselineError> {
    let mut ids = opinion_ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.is_empty() {
        return Err(BaselineError::Empty);
    }
    let mut points = Vec::with_capacity(ids.len());
    for id in &ids {
        let v = embeddings.get(id).ok_or_else(|| BaselineError::MissingEmbedding(id.clone()))?;
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(SimilarityError::ZeroNorm.into());
        }
        points.push(v.iter().map(|x| x / norm).collect::<Vec<f64>>());
    }
    let k = k.clamp(1, ids.len());
    let assignment = kmeans(&points, k, seed);
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in assignment.iter().enumerate() {
        groups.entry(c).or_default().push(i);
    }
    let mut key_points = Vec::with_capacity(groups.len());
    for members in groups.values() {
        let mut best = (f64::NEG_INFINITY, members[0]);
        for &i in members {
            let mut sum = 0.0;
            for &j in members {
                if i != j {
                    sum += cosine_similarity(&points[i], &points[j])?;
                }
            }
            if sum > best.0 {
                best = (sum, i);
            }
        }
        key_points.push(best.1);
    }
    let mut mapping = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for (kp, &j) in key_points.iter().enumerate() {
            let s = cosine_similarity(p, &points[j])?;
            if best.is_none_or(|(b, _)| s > b) {
                best = Some((s, kp));
            }
        }
        if let Some((s, kp)) = best {
            if s >= threshold {
                mapping.insert(ids[i].clone(), kp);
            }
        }
    }
    Ok(BaselineResult { key_points: key_points.into_iter().map(|i| ids[i].clone()).collect(), mapping })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_directions() {
        let mut e = EmbeddingStore::new(2).unwrap();
        let ids: Vec<String> = ["a1", "a2", "a3", "b1", "b2"].iter().map(|s| s.to_string()).collect();
        e.insert("a1", vec![1.0, 0.05]).unwrap();
        e.insert("a2", vec![1.0, 0.0]).unwrap();
        e.insert("a3", vec![1.0, -0.05]).unwrap();
        e.insert("b1", vec![0.0, 1.0]).unwrap();
        e.insert("b2", vec![0.05, 1.0]).unwrap();
        let r = automated_baseline(&ids, &e, 2, 0.9, 1).unwrap();
        assert!(r.key_points.contains(&"a2".to_string()));
        for id in ["a1", "a2", "a3", "b1", "b2"] {
            assert!(r.mapping.contains_key(id), "{id}");
        }
        assert_eq!(r.mapping["a1"], r.mapping["a3"]);
        assert_ne!(r.mapping["a1"], r.mapping["b1"]);
        let strict = automated_baseline(&ids, &e, 2, 0.999, 1).unwrap();
        assert!(strict.mapping.contains_key("a2"));
        assert!(!strict.mapping.contains_key("a1"));
        assert_eq!(automated_baseline(&[], &e, 2, 0.5, 1), Err(BaselineError::Empty));
    }
}
