//! Coverage, precision and diversity of argument lists, inter-rater
//! reliability, significance tests, and comparison with an expert list.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("{0}: empty denominator")]
    EmptyDenominator(&'static str),
    #[error("annotated set of {0} is not a subset of its observed set")]
    NotSubset(&'static str),
    #[error("item {0} has fewer than two ratings")]
    TooFewRatings(usize),
    #[error("rating matrix must be complete with at least 2 items and 2 raters")]
    BadMatrix,
    #[error("no between-item variance")]
    ZeroVariance,
    #[error("vote count must be odd, got {0}")]
    EvenVotes(usize),
    #[error("paired outcomes differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least two non-empty groups")]
    TooFewGroups,
    #[error("judgment references unknown argument {0}")]
    UnknownArgument(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OpinionSets {
    pub observed_h: BTreeSet<String>,
    pub annotated_h: BTreeSet<String>,
    pub observed_a: BTreeSet<String>,
    pub annotated_a: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageMode {
    All,
    Common,
}

fn ratio(num: usize, den: usize, what: &'static str) -> Result<f64, EvalError> {
    if den == 0 {
        return Err(EvalError::EmptyDenominator(what));
    }
    Ok(num as f64 / den as f64)
}

/// Returns `(C_H, C_A)`.
pub fn coverage(sets: &OpinionSets, mode: CoverageMode) -> Result<(f64, f64), EvalError> {
    if !sets.annotated_h.is_subset(&sets.observed_h) {
        return Err(EvalError::NotSubset("H"));
    }
    if !sets.annotated_a.is_subset(&sets.observed_a) {
        return Err(EvalError::NotSubset("A"));
    }
    match mode {
        CoverageMode::All => Ok((
            ratio(sets.annotated_h.len(), sets.observed_h.len(), "coverage H")?,
            ratio(sets.annotated_a.len(), sets.observed_a.len(), "coverage A")?,
        )),
        CoverageMode::Common => {
            let common = sets.observed_h.intersection(&sets.observed_a).count();
            let h = sets.annotated_h.intersection(&sets.observed_a).count();
            let a = sets.annotated_a.intersection(&sets.observed_h).count();
            Ok((ratio(h, common, "common coverage")?, ratio(a, common, "common coverage")?))
        }
    }
}

/// Majority judgment of whether an opinion matches its mapped argument.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub opinion_id: String,
    pub argument_id: String,
    pub votes: Vec<bool>,
    pub z: bool,
}

impl MatchRecord {
    pub fn from_votes(opinion_id: impl Into<String>, argument_id: impl Into<String>, votes: Vec<bool>) -> Result<Self, EvalError> {
        if votes.len().is_multiple_of(2) {
            return Err(EvalError::EvenVotes(votes.len()));
        }
        let yes = votes.iter().filter(|v| **v).count();
        Ok(Self { opinion_id: opinion_id.into(), argument_id: argument_id.into(), z: 2 * yes > votes.len(), votes })
    }
}

/// Mean of `z` per method over opinions annotated by both methods.
pub fn precision_common(matches_h: &[MatchRecord], matches_a: &[MatchRecord]) -> Result<(f64, f64), EvalError> {
    let ids_h: HashSet<&str> = matches_h.iter().map(|m| m.opinion_id.as_str()).collect();
    let ids_a: HashSet<&str> = matches_a.iter().map(|m| m.opinion_id.as_str()).collect();
    let mean = |ms: &[MatchRecord]| -> Result<f64, EvalError> {
        let common: Vec<&MatchRecord> = ms
            .iter()
            .filter(|m| ids_h.contains(m.opinion_id.as_str()) && ids_a.contains(m.opinion_id.as_str()))
            .collect();
        ratio(common.iter().filter(|m| m.z).count(), common.len(), "precision")
    };
    Ok((mean(matches_h)?, mean(matches_a)?))
}

/// Returns `(D_H, D_A)`.
pub fn diversity(arguments_h: usize, arguments_a: usize, common_observed: usize) -> Result<(f64, f64), EvalError> {
    Ok((ratio(arguments_h, common_observed, "diversity")?, ratio(arguments_a, common_observed, "diversity")?))
}

/// Prevalence- and bias-adjusted kappa for binary labels, pairwise form.
pub fn pabak(ratings: &[Vec<bool>]) -> Result<f64, EvalError> {
    if ratings.is_empty() {
        return Err(EvalError::EmptyDenominator("pabak"));
    }
    let mut po = 0.0;
    for (k, item) in ratings.iter().enumerate() {
        let n = item.len();
        if n < 2 {
            return Err(EvalError::TooFewRatings(k));
        }
        let yes = item.iter().filter(|v| **v).count();
        let no = n - yes;
        let agree = yes * yes.saturating_sub(1) / 2 + no * no.saturating_sub(1) / 2;
        po += agree as f64 / (n * (n - 1) / 2) as f64;
    }
    po /= ratings.len() as f64;
    Ok(2.0 * po - 1.0)
}

/// ICC(3,k): two-way mixed, consistency, average of k raters.
/// `matrix` is items × raters.
pub fn icc3k(matrix: &[Vec<f64>]) -> Result<f64, EvalError> {
    let n = matrix.len();
    let k = matrix.first().map_or(0, Vec::len);
    if n < 2 || k < 2 || matrix.iter().any(|r| r.len() != k || r.iter().any(|x| !x.is_finite())) {
        return Err(EvalError::BadMatrix);
    }
    let total = (n * k) as f64;
    let grand = matrix.iter().flatten().sum::<f64>() / total;
    let row_means: Vec<f64> = matrix.iter().map(|r| r.iter().sum::<f64>() / k as f64).collect();
    let col_means: Vec<f64> = (0..k).map(|j| matrix.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let ss_total: f64 = matrix.iter().flatten().map(|x| (x - grand).powi(2)).sum();
    let ss_rows: f64 = k as f64 * row_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_cols: f64 = n as f64 * col_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_error = (ss_total - ss_rows - ss_cols).max(0.0);
    let ms_rows = ss_rows / (n - 1) as f64;
    let ms_error = ss_error / ((n - 1) * (k - 1)) as f64;
    if ms_rows <= 1e-15 * (1.0 + ss_total) {
        return Err(EvalError::ZeroVariance);
    }
    Ok((ms_rows - ms_error) / ms_rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrrReport {
    pub task: String,
    pub pabak: Option<f64>,
    pub icc3k: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McNemarMethod {
    ExactBinomial,
    ChiSquareCorrected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McNemarResult {
    pub b: usize,
    pub c: usize,
    pub method: McNemarMethod,
    pub statistic: Option<f64>,
    pub p: f64,
}

pub const MCNEMAR_EXACT_BELOW: usize = 25;

fn binomial_half_cdf(k: usize, n: usize) -> f64 {
    // sum_{i<=k} C(n,i) / 2^n
    let mut term = 0.5f64.powi(n as i32);
    let mut sum = term;
    for i in 1..=k {
        term *= (n - i + 1) as f64 / i as f64;
        sum += term;
    }
    sum
}

/// `b`: first right and second wrong; `c`: the reverse.
pub fn mcnemar(b: usize, c: usize) -> McNemarResult {
    let n = b + c;
    if n == 0 {
        return McNemarResult { b, c, method: McNemarMethod::ExactBinomial, statistic: None, p: 1.0 };
    }
    if n < MCNEMAR_EXACT_BELOW {
        let p = (2.0 * binomial_half_cdf(b.min(c), n)).min(1.0);
        return McNemarResult { b, c, method: McNemarMethod::ExactBinomial, statistic: None, p };
    }
    let diff = (b as f64 - c as f64).abs() - 1.0;
    let stat = diff.max(0.0).powi(2) / n as f64;
    let chi = ChiSquared::new(1.0).expect("df > 0");
    McNemarResult { b, c, method: McNemarMethod::ChiSquareCorrected, statistic: Some(stat), p: chi.sf(stat) }
}

/// McNemar on paired per-item correctness.
pub fn mcnemar_paired(first: &[bool], second: &[bool]) -> Result<McNemarResult, EvalError> {
    if first.len() != second.len() {
        return Err(EvalError::LengthMismatch(first.len(), second.len()));
    }
    let b = first.iter().zip(second).filter(|(x, y)| **x && !**y).count();
    let c = first.iter().zip(second).filter(|(x, y)| !**x && **y).count();
    Ok(mcnemar(b, c))
}

/// Holm step-down adjustment; output aligned with input order.
pub fn holm(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    let mut out = vec![0.0; m];
    let mut running = 0.0f64;
    for (rank, &i) in order.iter().enumerate() {
        running = running.max(((m - rank) as f64 * p[i]).min(1.0));
        out[i] = running;
    }
    out
}

/// Average ranks (1-based) and the tie term sum(t^3 - t).
fn rank_all(values: &[f64]) -> (Vec<f64>, f64) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = 0.0;
    let mut s = 0;
    while s < idx.len() {
        let mut e = s + 1;
        while e < idx.len() && values[idx[e]] == values[idx[s]] {
            e += 1;
        }
        let avg = (s + e + 1) as f64 / 2.0;
        for &i in &idx[s..e] {
            ranks[i] = avg;
        }
        let t = (e - s) as f64;
        ties += t * t * t - t;
        s = e;
    }
    (ranks, ties)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KruskalWallis {
    pub h: f64,
    pub df: usize,
    pub p: f64,
    pub mean_ranks: Vec<f64>,
}

struct Pooled {
    n: f64,
    sizes: Vec<usize>,
    mean_ranks: Vec<f64>,
    ties: f64,
}

fn pool(groups: &[Vec<f64>]) -> Result<Pooled, EvalError> {
    if groups.len() < 2 || groups.iter().any(Vec::is_empty) {
        return Err(EvalError::TooFewGroups);
    }
    let all: Vec<f64> = groups.iter().flatten().copied().collect();
    let (ranks, ties) = rank_all(&all);
    let mut mean_ranks = Vec::with_capacity(groups.len());
    let mut at = 0;
    for g in groups {
        mean_ranks.push(ranks[at..at + g.len()].iter().sum::<f64>() / g.len() as f64);
        at += g.len();
    }
    Ok(Pooled { n: all.len() as f64, sizes: groups.iter().map(Vec::len).collect(), mean_ranks, ties })
}

/// Kruskal-Wallis H with tie correction; all values tied gives H = 0.
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<KruskalWallis, EvalError> {
    let p = pool(groups)?;
    let n = p.n;
    let df = groups.len() - 1;
    let correction = 1.0 - p.ties / (n * n * n - n);
    let h = if correction <= 1e-12 {
        0.0
    } else {
        let raw: f64 = p
            .sizes
            .iter()
            .zip(&p.mean_ranks)
            .map(|(&sz, &r)| sz as f64 * (r - (n + 1.0) / 2.0).powi(2))
            .sum::<f64>()
            * 12.0
            / (n * (n + 1.0));
        raw / correction
    };
    let chi = ChiSquared::new(df as f64).expect("df > 0");
    Ok(KruskalWallis { h, df, p: if h > 0.0 { chi.sf(h) } else { 1.0 }, mean_ranks: p.mean_ranks })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DunnPair {
    pub i: usize,
    pub j: usize,
    pub z: f64,
    pub p: f64,
    pub p_adjusted: f64,
}

/// Dunn's pairwise test on mean ranks, tie corrected, Holm adjusted.
pub fn dunn(groups: &[Vec<f64>]) -> Result<Vec<DunnPair>, EvalError> {
    let p = pool(groups)?;
    let n = p.n;
    let var = n * (n + 1.0) / 12.0 - p.ties / (12.0 * (n - 1.0));
    let normal = Normal::standard();
    let mut out = Vec::new();
    for i in 0..groups.len() {
        for j in i + 1..groups.len() {
            let se = (var.max(0.0) * (1.0 / p.sizes[i] as f64 + 1.0 / p.sizes[j] as f64)).sqrt();
            let (z, pv) = if se <= 1e-12 {
                (0.0, 1.0)
            } else {
                let z = (p.mean_ranks[i] - p.mean_ranks[j]) / se;
                (z, (2.0 * normal.sf(z.abs())).min(1.0))
            };
            out.push(DunnPair { i, j, z, p: pv, p_adjusted: 0.0 });
        }
    }
    let adj = holm(&out.iter().map(|d| d.p).collect::<Vec<_>>());
    for (d, a) in out.iter_mut().zip(adj) {
        d.p_adjusted = a;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub overlap: usize,
    pub new: usize,
    pub missing: usize,
}

/// `equivalent` holds (H argument, E argument) pairs judged to express the
/// same point. `overlap` counts H arguments with at least one equivalent.
pub fn confusion_compare(
    list_h: &[String],
    list_e: &[String],
    equivalent: &[(String, String)],
) -> Result<ConfusionCounts, EvalError> {
    let h: HashSet<&str> = list_h.iter().map(String::as_str).collect();
    let e: HashSet<&str> = list_e.iter().map(String::as_str).collect();
    let mut matched_h = HashSet::new();
    let mut matched_e = HashSet::new();
    for (a, b) in equivalent {
        if !h.contains(a.as_str()) {
            return Err(EvalError::UnknownArgument(a.clone()));
        }
        if !e.contains(b.as_str()) {
            return Err(EvalError::UnknownArgument(b.clone()));
        }
        matched_h.insert(a.as_str());
        matched_e.insert(b.as_str());
    }
    Ok(ConfusionCounts {
        overlap: matched_h.len(),
        new: h.len() - matched_h.len(),
        missing: e.len() - matched_e.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRecord {
    pub name: String,
    pub statistic: Option<f64>,
    pub p_raw: f64,
    pub p_adjusted: Option<f64>,
}

/// The evaluation report, serialized as JSON and rendered as text.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub metrics: Vec<Metric>,
    pub tests: Vec<TestRecord>,
    pub fixtures: Vec<String>,
}

impl EvalReport {
    pub fn metric(&mut self, name: impl Into<String>, value: Result<f64, EvalError>) {
        let (value, note) = match value {
            Ok(v) => (Some(v), None),
            Err(e) => (None, Some(e.to_string())),
        };
        self.metrics.push(Metric { name: name.into(), value, note });
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.name == name).and_then(|m| m.value)
    }

    pub fn render_text(&self) -> String {
        let width = self
            .metrics
            .iter()
            .map(|m| m.name.len())
            .chain(self.tests.iter().map(|t| t.name.len()))
            .max()
            .unwrap_or(6)
            .max(6);
        let mut out = format!("run {}\n\n", self.run_id);
        let _ = writeln!(out, "{:<width$}  {:>10}", "metric", "value");
        for m in &self.metrics {
            match m.value {
                Some(v) => {
                    let _ = writeln!(out, "{:<width$}  {:>10.4}", m.name, v);
                }
                None => {
                    let note = m.note.as_deref().unwrap_or("");
                    let _ = writeln!(out, "{:<width$}  {:>10}  {note}", m.name, "n/a");
                }
            }
        }
        if !self.tests.is_empty() {
            let _ = writeln!(out, "\n{:<width$}  {:>10}  {:>10}  {:>10}", "test", "statistic", "p", "p_adj");
            for t in &self.tests {
                let stat = t.statistic.map_or("-".to_string(), |s| format!("{s:.4}"));
                let adj = t.p_adjusted.map_or("-".to_string(), |p| format!("{p:.4}"));
                let _ = writeln!(out, "{:<width$}  {:>10}  {:>10.4}  {:>10}", t.name, stat, t.p_raw, adj);
            }
        }
        if !self.fixtures.is_empty() {
            let _ = writeln!(out, "\nfixtures: {}", self.fixtures.join(", "));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn coverage_fixtures() {
        let s = OpinionSets {
            observed_h: set(&["a", "b"]),
            annotated_h: set(&["a", "b"]),
            observed_a: set(&["a", "b", "c", "d"]),
            annotated_a: set(&[]),
        };
        assert_eq!(coverage(&s, CoverageMode::All).unwrap(), (1.0, 0.0));
        // observed_h inside observed_a: common H equals all-mode H
        let s = OpinionSets {
            observed_h: set(&["a", "b", "c"]),
            annotated_h: set(&["a"]),
            observed_a: set(&["a", "b", "c", "d", "e"]),
            annotated_a: set(&["b", "c", "e"]),
        };
        let (all_h, _) = coverage(&s, CoverageMode::All).unwrap();
        let (common_h, common_a) = coverage(&s, CoverageMode::Common).unwrap();
        assert_eq!(all_h, common_h);
        assert!((common_a - 2.0 / 3.0).abs() < 1e-15);
        let bad = OpinionSets { annotated_h: set(&["z"]), ..s.clone() };
        assert_eq!(coverage(&bad, CoverageMode::All), Err(EvalError::NotSubset("H")));
        assert!(coverage(&OpinionSets::default(), CoverageMode::Common).is_err());
    }

    #[test]
    fn precision_and_diversity() {
        let rec = |o: &str, z: bool| MatchRecord::from_votes(o, "k", vec![z, z, z]).unwrap();
        let h = vec![rec("1", true), rec("2", false), rec("9", false)];
        let a = vec![rec("1", true), rec("2", true)];
        assert_eq!(precision_common(&h, &a).unwrap(), (0.5, 1.0));
        assert!(precision_common(&h, &[]).is_err());
        assert_eq!(MatchRecord::from_votes("o", "a", vec![true, false]), Err(EvalError::EvenVotes(2)));
        assert!(MatchRecord::from_votes("o", "a", vec![true, false, true]).unwrap().z);
        assert_eq!(diversity(17, 0, 100).unwrap(), (0.17, 0.0));
        assert!(diversity(1, 1, 0).is_err());
    }

    #[test]
    fn pabak_fixtures() {
        assert_eq!(pabak(&[vec![true, true, true], vec![false, false]]).unwrap(), 1.0);
        // p_o = 0.5
        assert_eq!(pabak(&[vec![true, true], vec![true, false]]).unwrap(), 0.0);
        assert_eq!(pabak(&[vec![true]]), Err(EvalError::TooFewRatings(0)));
        // balanced two-rater case equals Cohen's kappa with marginals 0.5
        let items = [vec![true, true], vec![false, false], vec![true, false], vec![false, true], vec![true, true], vec![false, false]];
        let po = 4.0 / 6.0;
        let kappa = (po - 0.5) / 0.5;
        assert!((pabak(&items).unwrap() - kappa).abs() < 1e-12);
    }

    fn icc_oracle(m: &[Vec<f64>]) -> f64 {
        let n = m.len() as f64;
        let k = m[0].len() as f64;
        let mut grand = 0.0;
        for r in m {
            for x in r {
                grand += x;
            }
        }
        grand /= n * k;
        let mut ssr = 0.0;
        for r in m {
            let mean: f64 = r.iter().sum::<f64>() / k;
            ssr += (mean - grand) * (mean - grand);
        }
        ssr *= k;
        let mut ssc = 0.0;
        for j in 0..m[0].len() {
            let mean: f64 = m.iter().map(|r| r[j]).sum::<f64>() / n;
            ssc += (mean - grand) * (mean - grand);
        }
        ssc *= n;
        let mut sst = 0.0;
        for r in m {
            for x in r {
                sst += (x - grand) * (x - grand);
            }
        }
        let msr = ssr / (n - 1.0);
        let mse = (sst - ssr - ssc) / ((n - 1.0) * (k - 1.0));
        (msr - mse) / msr
    }

    #[test]
    fn icc_fixtures() {
        let same = vec![vec![1.0, 1.0], vec![3.0, 3.0], vec![4.0, 4.0]];
        assert!((icc3k(&same).unwrap() - 1.0).abs() < 1e-12);
        let offset = vec![vec![1.0, 3.0, 0.5], vec![2.0, 4.0, 1.5], vec![5.0, 7.0, 4.5]];
        assert!((icc3k(&offset).unwrap() - 1.0).abs() < 1e-12);
        let m = vec![
            vec![4.0, 2.0, 5.0],
            vec![3.0, 3.0, 4.0],
            vec![5.0, 4.0, 5.0],
            vec![1.0, 2.0, 2.0],
            vec![2.0, 1.0, 3.0],
            vec![4.0, 5.0, 4.0],
        ];
        assert!((icc3k(&m).unwrap() - icc_oracle(&m)).abs() < 1e-9);
        assert_eq!(icc3k(&[vec![2.0, 3.0], vec![2.0, 3.0]]), Err(EvalError::ZeroVariance));
        assert_eq!(icc3k(&[vec![2.0, 3.0]]), Err(EvalError::BadMatrix));
    }

    #[test]
    fn mcnemar_fixtures() {
        assert_eq!(mcnemar(5, 5).p, 1.0);
        assert_eq!(mcnemar(0, 0).p, 1.0);
        // b=0, c=6: 2 * 2^-6
        assert!((mcnemar(0, 6).p - 2.0 / 64.0).abs() < 1e-15);
        let big = mcnemar(30, 10);
        assert_eq!(big.method, McNemarMethod::ChiSquareCorrected);
        assert!((big.statistic.unwrap() - 361.0 / 40.0).abs() < 1e-12);
        assert!(big.p < 0.01);
        let r = mcnemar_paired(&[true, true, false], &[false, true, true]).unwrap();
        assert_eq!((r.b, r.c), (1, 1));
    }

    #[test]
    fn holm_fixture() {
        let adj = holm(&[0.01, 0.04, 0.03]);
        for (a, e) in adj.iter().zip([0.03, 0.06, 0.06]) {
            assert!((a - e).abs() < 1e-12);
        }
        assert_eq!(holm(&[0.6, 0.9]), vec![1.0, 1.0]);
    }

    fn kw_oracle(groups: &[Vec<f64>]) -> f64 {
        // ranks by counting: rank = #less + (#equal + 1) / 2
        let all: Vec<f64> = groups.iter().flatten().copied().collect();
        let n = all.len() as f64;
        let rank = |x: f64| {
            let less = all.iter().filter(|&&y| y < x).count() as f64;
            let eq = all.iter().filter(|&&y| y == x).count() as f64;
            less + (eq + 1.0) / 2.0
        };
        let mut h = 0.0;
        for g in groups {
            let r: f64 = g.iter().map(|&x| rank(x)).sum();
            h += r * r / g.len() as f64;
        }
        h = 12.0 / (n * (n + 1.0)) * h - 3.0 * (n + 1.0);
        let mut distinct = all.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        let t: f64 = distinct
            .iter()
            .map(|&v| {
                let c = all.iter().filter(|&&y| y == v).count() as f64;
                c * c * c - c
            })
            .sum();
        h / (1.0 - t / (n * n * n - n))
    }

    #[test]
    fn kruskal_fixtures() {
        let g = vec![vec![2.9, 3.0, 2.5], vec![3.8, 2.7, 4.0, 2.4], vec![2.8, 3.4, 3.7]];
        let kw = kruskal_wallis(&g).unwrap();
        assert!((kw.h - kw_oracle(&g)).abs() < 1e-9);
        let tied = vec![vec![1.0, 2.0, 2.0], vec![2.0, 3.0], vec![1.0, 3.0, 3.0, 2.0]];
        assert!((kruskal_wallis(&tied).unwrap().h - kw_oracle(&tied)).abs() < 1e-9);
        let same = vec![vec![1.0, 2.0, 3.0]; 3];
        let kw = kruskal_wallis(&same).unwrap();
        assert_eq!(kw.h, 0.0);
        assert!(dunn(&same).unwrap().iter().all(|d| d.p_adjusted >= 0.05 && d.z == 0.0));
        let flat = vec![vec![4.0, 4.0], vec![4.0]];
        assert_eq!(kruskal_wallis(&flat).unwrap().h, 0.0);
        assert_eq!(dunn(&flat).unwrap()[0].p, 1.0);
        assert_eq!(kruskal_wallis(&[vec![1.0]]), Err(EvalError::TooFewGroups));
    }

    #[test]
    fn dunn_fixture() {
        let g = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]];
        let d = dunn(&g).unwrap();
        // N = 9, no ties: sigma^2 = 9*10/12 = 7.5; mean ranks 2, 5, 8
        let se = (7.5f64 * (2.0 / 3.0)).sqrt();
        let expect = [(2.0 - 5.0) / se, (2.0 - 8.0) / se, (5.0 - 8.0) / se];
        for (p, e) in d.iter().zip(expect) {
            assert!((p.z - e).abs() < 1e-9);
        }
        let raw: Vec<f64> = d.iter().map(|x| x.p).collect();
        for (p, a) in d.iter().zip(holm(&raw)) {
            assert_eq!(p.p_adjusted, a);
        }
    }

    fn ids(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|k| format!("{prefix}{k}")).collect()
    }

    #[test]
    fn confusion_fixtures() {
        let h = ids("h", 4);
        let same: Vec<(String, String)> = h.iter().map(|x| (x.clone(), x.clone())).collect();
        assert_eq!(
            confusion_compare(&h, &h, &same).unwrap(),
            ConfusionCounts { overlap: 4, new: 0, missing: 0 }
        );
        let e = ids("e", 3);
        assert_eq!(confusion_compare(&h, &e, &[]).unwrap(), ConfusionCounts { overlap: 0, new: 4, missing: 3 });
        assert_eq!(
            confusion_compare(&h, &e, &[("x".into(), "e0".into())]),
            Err(EvalError::UnknownArgument("x".into()))
        );
    }

    #[test]
    fn report_renders() {
        let mut r = EvalReport { run_id: "r1".into(), ..Default::default() };
        r.metric("coverage_h", Ok(0.5));
        r.metric("icc3k", Err(EvalError::ZeroVariance));
        r.tests.push(TestRecord { name: "mcnemar".into(), statistic: None, p_raw: 0.01, p_adjusted: Some(0.02) });
        let text = r.render_text();
        assert!(text.contains("coverage_h") && text.contains("0.5000"));
        assert!(text.contains("n/a") && text.contains("no between-item variance"));
        assert_eq!(r.get("coverage_h"), Some(0.5));
        assert_eq!(r.get("icc3k"), None);
    }

    proptest! {
        #[test]
        fn pabak_label_swap(items in prop::collection::vec(prop::collection::vec(any::<bool>(), 2..6), 1..10)) {
            let flipped: Vec<Vec<bool>> = items.iter().map(|r| r.iter().map(|b| !b).collect()).collect();
            let a = pabak(&items).unwrap();
            prop_assert!((a - pabak(&flipped).unwrap()).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&a));
        }

        #[test]
        fn holm_monotone(p in prop::collection::vec(0.0f64..1.0, 1..12)) {
            let adj = holm(&p);
            let mut order: Vec<usize> = (0..p.len()).collect();
            order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
            for w in order.windows(2) {
                prop_assert!(adj[w[0]] <= adj[w[1]]);
            }
            for (a, r) in adj.iter().zip(&p) {
                prop_assert!(a >= r && *a <= 1.0);
            }
        }

        #[test]
        fn kw_monotone_invariant(groups in prop::collection::vec(prop::collection::vec(-5i32..5, 1..6), 2..5)) {
            let g: Vec<Vec<f64>> = groups.iter().map(|v| v.iter().map(|&x| x as f64).collect()).collect();
            let t: Vec<Vec<f64>> = g.iter().map(|v| v.iter().map(|x| (x / 3.0).exp() * 2.0 + 7.0).collect()).collect();
            let a = kruskal_wallis(&g).unwrap().h;
            prop_assert!((a - kruskal_wallis(&t).unwrap().h).abs() < 1e-9);
            prop_assert!(a >= -1e-12);
        }

        #[test]
        fn coverage_bounded(
            obs_h in prop::collection::btree_set(0u8..30, 1..20),
            obs_a in prop::collection::btree_set(0u8..30, 1..20),
            keep in any::<u32>(),
        ) {
            let s = |v: &BTreeSet<u8>| v.iter().map(|x| x.to_string()).collect::<BTreeSet<_>>();
            let pick = |v: &BTreeSet<u8>, salt: u32| v.iter().filter(|x| (keep.rotate_left(**x as u32 + salt)) & 1 == 1).map(|x| x.to_string()).collect::<BTreeSet<_>>();
            let sets = OpinionSets { observed_h: s(&obs_h), annotated_h: pick(&obs_h, 0), observed_a: s(&obs_a), annotated_a: pick(&obs_a, 7) };
            let (h, a) = coverage(&sets, CoverageMode::All).unwrap();
            prop_assert!((0.0..=1.0).contains(&h) && (0.0..=1.0).contains(&a));
            if let Ok((h, a)) = coverage(&sets, CoverageMode::Common) {
                prop_assert!((0.0..=1.0).contains(&h) && (0.0..=1.0).contains(&a));
            }
        }
    }
}
