//! Readers and writers for the on-disk input formats.
//!
//! * corpus: JSON lines, one [`RawOpinionRow`] per line
//! * embeddings: binary matrix (`u32` count, `u32` dim, then `count * dim`
//!   little-endian `f32`) plus a JSON array of ids in row order
//! * quality: JSON lines `{"id", "quality"}`
//! * topics: one JSON document per corpus with its topic profiles

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EmbeddingError, EmbeddingStore, RawOpinionRow, TopicProfile};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {source}")]
    Json { path: String, line: usize, source: serde_json::Error },
    #[error("embedding file {0}: {1}")]
    Embedding(String, String),
    #[error(transparent)]
    Store(#[from] EmbeddingError),
    #[error("{path}: quality for {id} is {value}, outside [0, 1]")]
    QualityRange { path: String, id: String, value: f64 },
}

fn open(path: &Path) -> Result<File, IoError> {
    File::open(path).map_err(|source| IoError::Io { path: path.display().to_string(), source })
}

fn create(path: &Path) -> Result<File, IoError> {
    File::create(path).map_err(|source| IoError::Io { path: path.display().to_string(), source })
}

/// Reads a JSON-lines file, skipping blank lines.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    let reader = BufReader::new(open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| IoError::Io { path: path.display().to_string(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line)
            .map_err(|source| IoError::Json { path: path.display().to_string(), line: i + 1, source })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), IoError> {
    let mut w = BufWriter::new(create(path)?);
    let err = |source| IoError::Io { path: path.display().to_string(), source };
    for row in rows {
        let line = serde_json::to_string(row)
            .map_err(|source| IoError::Json { path: path.display().to_string(), line: 0, source })?;
        w.write_all(line.as_bytes()).map_err(err)?;
        w.write_all(b"\n").map_err(err)?;
    }
    w.flush().map_err(err)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let reader = BufReader::new(open(path)?);
    serde_json::from_reader(reader)
        .map_err(|source| IoError::Json { path: path.display().to_string(), line: 0, source })
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|source| IoError::Json { path: path.display().to_string(), line: 0, source })?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|source| IoError::Io { path: path.display().to_string(), source })
}

pub fn read_corpus(path: &Path) -> Result<Vec<RawOpinionRow>, IoError> {
    read_jsonl(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityRow {
    pub id: String,
    pub quality: f64,
}

pub fn read_quality(path: &Path) -> Result<HashMap<String, f64>, IoError> {
    let rows: Vec<QualityRow> = read_jsonl(path)?;
    let mut out = HashMap::with_capacity(rows.len());
    for row in rows {
        if !(0.0..=1.0).contains(&row.quality) {
            return Err(IoError::QualityRange {
                path: path.display().to_string(),
                id: row.id,
                value: row.quality,
            });
        }
        out.insert(row.id, row.quality);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicFile {
    pub corpus_id: String,
    pub topics: Vec<TopicProfile>,
}

pub fn read_topics(path: &Path) -> Result<TopicFile, IoError> {
    read_json(path)
}

/// One row of the topic-assignment export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicAssignmentRow {
    pub argument_id: String,
    pub counts: Vec<u32>,
}

pub fn encode_embeddings(rows: &[Vec<f32>], dim: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + rows.len() * dim * 4);
    out.extend_from_slice(&(rows.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for row in rows {
        for &x in row {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<(usize, Vec<Vec<f32>>), String> {
    if bytes.len() < 8 {
        return Err("truncated header".into());
    }
    let count = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err("dim is zero".into());
    }
    let expected = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(8))
        .ok_or("header overflows")?;
    if bytes.len() != expected {
        return Err(format!("expected {expected} bytes for {count}x{dim}, found {}", bytes.len()));
    }
    let rows = bytes[8..]
        .chunks_exact(dim * 4)
        .map(|row| {
            row.chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect()
        })
        .collect();
    Ok((dim, rows))
}

pub fn read_embeddings(matrix: &Path, ids: &Path) -> Result<EmbeddingStore, IoError> {
    let mut bytes = Vec::new();
    open(matrix)?
        .read_to_end(&mut bytes)
        .map_err(|source| IoError::Io { path: matrix.display().to_string(), source })?;
    let (dim, rows) = decode_embeddings(&bytes).map_err(|e| IoError::Embedding(matrix.display().to_string(), e))?;
    let ids: Vec<String> = read_json(ids)?;
    if ids.len() != rows.len() {
        return Err(IoError::Embedding(
            matrix.display().to_string(),
            format!("{} rows but {} ids", rows.len(), ids.len()),
        ));
    }
    let mut store = EmbeddingStore::new(dim)?;
    for (id, row) in ids.into_iter().zip(rows) {
        store.insert(id, row.into_iter().map(f64::from).collect())?;
    }
    Ok(store)
}

pub fn write_embeddings(matrix: &Path, ids_path: &Path, ids: &[String], rows: &[Vec<f32>], dim: usize) -> Result<(), IoError> {
    let bytes = encode_embeddings(rows, dim);
    std::fs::write(matrix, bytes).map_err(|source| IoError::Io { path: matrix.display().to_string(), source })?;
    write_json(ids_path, ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn embedding_roundtrip(rows in prop::collection::vec(prop::collection::vec(-1e3f32..1e3, 3), 0..20)) {
            let bytes = encode_embeddings(&rows, 3);
            let (dim, back) = decode_embeddings(&bytes).unwrap();
            prop_assert_eq!(dim, 3);
            prop_assert_eq!(back, rows);
        }
    }

    #[test]
    fn embedding_header_layout() {
        let bytes = encode_embeddings(&[vec![1.0, 2.0]], 2);
        assert_eq!(&bytes[..8], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &1.0f32.to_le_bytes());
        assert!(decode_embeddings(&bytes[..10]).is_err());
    }

    #[test]
    fn files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("emb.bin");
        let i = dir.path().join("emb.ids.json");
        write_embeddings(&m, &i, &["a".into(), "b".into()], &[vec![1.0, 0.0], vec![0.0, 1.0]], 2).unwrap();
        let store = read_embeddings(&m, &i).unwrap();
        assert_eq!(store.get("b").unwrap(), &[0.0, 1.0]);

        let q = dir.path().join("q.jsonl");
        std::fs::write(&q, "{\"id\":\"a\",\"quality\":0.5}\n\n{\"id\":\"b\",\"quality\":1.0}\n").unwrap();
        let quality = read_quality(&q).unwrap();
        assert_eq!(quality["a"], 0.5);
        std::fs::write(&q, "{\"id\":\"a\",\"quality\":1.5}\n").unwrap();
        assert!(matches!(read_quality(&q), Err(IoError::QualityRange { .. })));
    }

    #[test]
    fn topic_file_parses() {
        let json = r#"{"corpus_id":"young","topics":[{"topic_id":"t0","top_words":["school","children"],"clarity_ratings":[4,5]}]}"#;
        let t: TopicFile = serde_json::from_str(json).unwrap();
        assert_eq!(t.topics[0].mean_clarity(), Some(4.5));
        assert!(!t.topics[0].duplicate);
    }
}
