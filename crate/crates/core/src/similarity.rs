//! Pairwise similarity scores between arguments.

use thiserror::Error;

use crate::model::TopicVector;

#[derive(Debug, Error, PartialEq)]
pub enum SimilarityError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero-norm vector")]
    ZeroNorm,
}

/// `u·v / (‖u‖‖v‖)`, clamped into [-1, 1].
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, SimilarityError> {
    if u.len() != v.len() {
        return Err(SimilarityError::DimensionMismatch(u.len(), v.len()));
    }
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(SimilarityError::ZeroNorm);
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

/// `1 - cosine_similarity`, in [0, 2].
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64, SimilarityError> {
    cosine_similarity(u, v).map(|s| 1.0 - s)
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `1 / (1 + d)` for the Euclidean distance `d` between topic count vectors.
///
/// Strictly decreasing in `d`, so it orders pairs exactly as `1 / d` does
/// while staying finite for identical vectors.
pub fn topic_distance_similarity(t1: &TopicVector, t2: &TopicVector) -> Result<f64, SimilarityError> {
    if t1.len() != t2.len() {
        return Err(SimilarityError::DimensionMismatch(t1.len(), t2.len()));
    }
    let d2: f64 = t1
        .counts
        .iter()
        .zip(&t2.counts)
        .map(|(&a, &b)| {
            let diff = f64::from(a) - f64::from(b);
            diff * diff
        })
        .sum();
    Ok(1.0 / (1.0 + d2.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_fixtures() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        // 32 / (sqrt(14) * sqrt(77))
        let expected = 32.0 / (14.0f64.sqrt() * 77.0f64.sqrt());
        let got = cosine_similarity(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.9746).abs() < 5e-5);
    }

    #[test]
    fn cosine_errors() {
        assert_eq!(cosine_similarity(&[1.0], &[1.0, 2.0]), Err(SimilarityError::DimensionMismatch(1, 2)));
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]), Err(SimilarityError::ZeroNorm));
    }

    #[test]
    fn topic_similarity_fixtures() {
        let a = TopicVector::new(vec![1, 0]);
        let b = TopicVector::new(vec![0, 1]);
        assert_eq!(topic_distance_similarity(&a, &a).unwrap(), 1.0);
        let got = topic_distance_similarity(&a, &b).unwrap();
        assert!((got - 1.0 / (1.0 + 2f64.sqrt())).abs() < 1e-12);
        assert!((got - 0.4142).abs() < 5e-5);
        assert!(topic_distance_similarity(&a, &TopicVector::new(vec![1])).is_err());
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_bounded(
            u in prop::collection::vec(-10.0f64..10.0, 4),
            v in prop::collection::vec(-10.0f64..10.0, 4),
        ) {
            prop_assume!(u.iter().any(|x| *x != 0.0) && v.iter().any(|x| *x != 0.0));
            let a = cosine_similarity(&u, &v).unwrap();
            let b = cosine_similarity(&v, &u).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!(a.abs() <= 1.0 + 1e-9);
        }

        #[test]
        fn topic_similarity_decreases_with_distance(
            base in prop::collection::vec(0u32..6, 5),
            x in prop::collection::vec(0u32..6, 5),
            y in prop::collection::vec(0u32..6, 5),
        ) {
            let to_f = |v: &[u32]| v.iter().map(|&c| f64::from(c)).collect::<Vec<_>>();
            let dx = euclidean_distance(&to_f(&base), &to_f(&x));
            let dy = euclidean_distance(&to_f(&base), &to_f(&y));
            let (b, x, y) = (TopicVector::new(base), TopicVector::new(x), TopicVector::new(y));
            let sx = topic_distance_similarity(&b, &x).unwrap();
            let sy = topic_distance_similarity(&b, &y).unwrap();
            if dx < dy {
                prop_assert!(sx > sy);
            } else if dx > dy {
                prop_assert!(sx < sy);
            }
        }
    }
}
