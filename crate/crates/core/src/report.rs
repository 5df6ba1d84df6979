//! Assembles the evaluation report from a finished (or partial) run.

use std::collections::{BTreeSet, HashMap};

use crate::clustering::stance_minority_ratio;
use crate::engine::{Engine, AUTOMATED, HYENA};
use crate::evaluation::{
    confusion_compare, coverage, diversity, dunn, holm, icc3k, kruskal_wallis, mcnemar_paired, pabak,
    precision_common, ConfusionCounts, CoverageMode, EvalError, EvalReport, MatchRecord, OpinionSets, TestRecord,
};
use crate::model::{KeyArgument, Stance};
use crate::sampling::overlap_ratio;
use crate::selection::{
    odd_one_out, sample_triples, select_centroid, select_quality, select_random, CentroidDistanceJudge, RandomJudge,
    SelectionError, SelectionScorer, TokenRecallScorer,
};
use crate::util::derive_seed;

fn mean(xs: &[f64]) -> Result<f64, EvalError> {
    if xs.is_empty() {
        return Err(EvalError::EmptyDenominator("mean"));
    }
    Ok(xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Opinion sets seen and annotated by each method.
pub fn opinion_sets(engine: &Engine) -> OpinionSets {
    let observed_h = engine.sessions().iter().flat_map(|s| s.served.iter().cloned()).collect();
    let annotated_h = engine.opinion_mapping().into_keys().collect();
    let observed_a = engine.opinions().iter().map(|o| o.id.clone()).collect();
    let annotated_a = engine.baseline().map(|b| b.mapping.keys().cloned().collect()).unwrap_or_default();
    OpinionSets { observed_h, annotated_h, observed_a, annotated_a }
}

/// Token-recall score of each extractive method per cluster, in
/// `[random, centroid, quality]` order.
pub fn extractive_scores(engine: &Engine) -> Result<[Vec<f64>; 3], SelectionError> {
    let mut out: [Vec<f64>; 3] = Default::default();
    let Some(clustering) = engine.clustering() else {
        return Ok(out);
    };
    let all: HashMap<String, &KeyArgument> = engine.arguments().into_iter().map(|a| (a.id.clone(), a)).collect();
    let quality = engine.argument_quality();
    let scorer = TokenRecallScorer;
    for (k, cluster) in clustering.best.clusters.iter().enumerate() {
        let members: Vec<&KeyArgument> = cluster.iter().map(|id| all[id]).collect();
        let refs: Vec<String> = members.iter().map(|a| a.text.clone()).collect();
        let picks = [
            select_random(k, &members, engine.cluster_seed(k))?,
            select_centroid(k, &members, engine.embeddings())?,
            select_quality(k, &members, &quality)?,
        ];
        for (slot, rep) in out.iter_mut().zip(picks) {
            slot.push(scorer.score(&rep.text, &refs)?);
        }
    }
    Ok(out)
}

fn push_test(report: &mut EvalReport, name: &str, statistic: Option<f64>, p: f64) {
    report.tests.push(TestRecord { name: name.into(), statistic, p_raw: p, p_adjusted: None });
}

pub fn build_report(engine: &Engine) -> EvalReport {
    let config = engine.config();
    let mut r = EvalReport { run_id: config.run_id.clone(), ..EvalReport::default() };
    let arguments = engine.arguments();
    r.metric("opinions", Ok(engine.opinions().len() as f64));
    r.metric("sessions", Ok(engine.sessions().len() as f64));
    r.metric("key_arguments", Ok(arguments.len() as f64));
    let (mut new, mut skip, mut already) = (0, 0, 0);
    for s in engine.sessions() {
        let c = s.counts();
        new += c.new;
        skip += c.skip;
        already += c.already;
    }
    let actions = new + skip + already;
    let share = |x: usize| if actions == 0 { Err(EvalError::EmptyDenominator("actions")) } else { Ok(x as f64 / actions as f64) };
    r.metric("action_share_new", share(new));
    r.metric("action_share_skip", share(skip));
    r.metric("action_share_already", share(already));

    let overlaps: Vec<f64> = arguments
        .iter()
        .filter_map(|a| {
            let o = engine.opinion(&a.source_opinion_id)?;
            overlap_ratio(&o.text, &a.text).ok()
        })
        .collect();
    r.metric("overlap_ratio_mean", mean(&overlaps));
    let verbatim: Vec<f64> = overlaps.iter().map(|&x| if x >= 1.0 { 1.0 } else { 0.0 }).collect();
    r.metric("verbatim_share", mean(&verbatim));

    if let Some(stats) = engine.scheduler().map(|s| s.stats()) {
        r.metric("pairs_total", Ok(stats.total_pairs as f64));
        r.metric("human_queries", Ok(stats.human_queries as f64));
        r.metric("propagated_labels", Ok(stats.propagated as f64));
        r.metric("query_ratio_delta", Ok(stats.delta));
        r.metric("transitivity_tau", Ok(stats.tau));
    }
    if let Some(c) = engine.clustering() {
        r.metric("clusters", Ok(c.best.clusters.len() as f64));
        r.metric("cluster_error", Ok(c.best.error));
        let stances: HashMap<String, Stance> = arguments.iter().map(|a| (a.id.clone(), a.stance)).collect();
        r.metric("stance_minority_mean", mean(&stance_minority_ratio(&c.best.clusters, &stances).minority_ratio));
    }

    let sets = opinion_sets(engine);
    match coverage(&sets, CoverageMode::All) {
        Ok((h, a)) => {
            r.metric("coverage_all_h", Ok(h));
            r.metric("coverage_all_a", Ok(a));
        }
        Err(e) => r.metric("coverage_all", Err(e)),
    }
    match coverage(&sets, CoverageMode::Common) {
        Ok((h, a)) => {
            r.metric("coverage_common_h", Ok(h));
            r.metric("coverage_common_a", Ok(a));
        }
        Err(e) => r.metric("coverage_common", Err(e)),
    }
    let split = |method: &str| -> Vec<MatchRecord> {
        engine.matches().iter().filter(|m| m.method == method).map(|m| m.record.clone()).collect()
    };
    let (mh, ma) = (split(HYENA), split(AUTOMATED));
    match precision_common(&mh, &ma) {
        Ok((h, a)) => {
            r.metric("precision_h", Ok(h));
            r.metric("precision_a", Ok(a));
        }
        Err(e) => r.metric("precision", Err(e)),
    }
    let common_observed = sets.observed_h.intersection(&sets.observed_a).count();
    let n_a = engine.baseline().map_or(0, |b| b.key_points.len());
    match diversity(engine.representatives().len(), n_a, common_observed) {
        Ok((h, a)) => {
            r.metric("diversity_h", Ok(h));
            r.metric("diversity_a", Ok(a));
        }
        Err(e) => r.metric("diversity", Err(e)),
    }

    let topic_items: Vec<Vec<bool>> = engine
        .topic_votes()
        .values()
        .filter(|v| !v.is_empty())
        .flat_map(|votes| (0..votes[0].len()).map(move |t| votes.iter().map(|v| v[t]).collect::<Vec<bool>>()))
        .collect();
    r.metric("pabak_topics", pabak(&topic_items));
    r.metric("pabak_pairs", pabak(&engine.pair_votes()));
    let match_votes: Vec<Vec<bool>> = engine.matches().iter().map(|m| m.record.votes.clone()).collect();
    r.metric("pabak_matches", pabak(&match_votes));
    let raters = engine.topics().iter().map(|t| t.clarity_ratings.len()).max().unwrap_or(0);
    let clarity: Vec<Vec<f64>> = engine
        .topics()
        .iter()
        .filter(|t| t.clarity_ratings.len() == raters)
        .map(|t| t.clarity_ratings.iter().map(|&x| f64::from(x)).collect())
        .collect();
    r.metric("icc3k_topic_clarity", icc3k(&clarity));

    if let Some(c) = engine.clustering() {
        odd_one_out_section(engine, &c.best.clusters, &mut r);
        selection_section(engine, &mut r);
    }

    let adjusted = holm(&r.tests.iter().map(|t| t.p_raw).collect::<Vec<_>>());
    for (t, a) in r.tests.iter_mut().zip(adjusted) {
        if t.p_adjusted.is_none() {
            t.p_adjusted = Some(a);
        }
    }
    r.fixtures = vec![
        format!("corpus_id={}", config.corpus_id),
        format!("sampler_seed={}", config.sampler.seed),
        format!("cluster_seed={}", config.cluster_seed),
        format!("selection_seed={}", config.selection_seed),
        format!("eval_seed={}", config.eval_seed),
    ];
    r
}

fn odd_one_out_section(engine: &Engine, clusters: &[Vec<String>], r: &mut EvalReport) {
    let config = engine.config();
    let tasks = match sample_triples(clusters, config.triples, derive_seed(config.eval_seed, "triples")) {
        Ok(t) if !t.is_empty() => t,
        Ok(_) => return,
        Err(e) => {
            r.metrics.push(crate::evaluation::Metric {
                name: "odd_one_out".into(),
                value: None,
                note: Some(e.to_string()),
            });
            return;
        }
    };
    let text_of = |id: &str| engine.argument(id).map(|a| a.text.clone()).unwrap_or_default();
    let mut random = RandomJudge::new(derive_seed(config.eval_seed, "random-judge"));
    let mut centroid = CentroidDistanceJudge { embeddings: engine.embeddings() };
    let (Ok(a), Ok(b)) = (odd_one_out(&mut random, &tasks, &text_of), odd_one_out(&mut centroid, &tasks, &text_of))
    else {
        return;
    };
    let acc = |v: &[bool]| v.iter().filter(|x| **x).count() as f64 / v.len() as f64;
    r.metric("odd_one_out_random", Ok(acc(&a)));
    r.metric("odd_one_out_centroid", Ok(acc(&b)));
    if let Ok(m) = mcnemar_paired(&b, &a) {
        push_test(r, "mcnemar_centroid_vs_random", m.statistic, m.p);
    }
}

fn selection_section(engine: &Engine, r: &mut EvalReport) {
    let Ok(scores) = extractive_scores(engine) else {
        return;
    };
    for (name, s) in ["random", "centroid", "quality"].iter().zip(&scores) {
        r.metric(format!("selection_score_{name}"), mean(s));
    }
    let chosen: Vec<f64> = engine.representatives().iter().filter_map(|x| x.score).collect();
    r.metric("selection_score_chosen", mean(&chosen));
    let groups = scores.to_vec();
    if let Ok(kw) = kruskal_wallis(&groups) {
        push_test(r, "kruskal_wallis_selection", Some(kw.h), kw.p);
    }
    if let Ok(pairs) = dunn(&groups) {
        let names = ["random", "centroid", "quality"];
        for d in pairs {
            r.tests.push(TestRecord {
                name: format!("dunn_{}_vs_{}", names[d.i], names[d.j]),
                statistic: Some(d.z),
                p_raw: d.p,
                p_adjusted: Some(d.p_adjusted),
            });
        }
    }
}

/// Adds the expert comparison to a report.
pub fn add_confusion(
    report: &mut EvalReport,
    list_h: &[String],
    list_e: &[String],
    equivalent: &[(String, String)],
) -> Result<ConfusionCounts, EvalError> {
    let c = confusion_compare(list_h, list_e, equivalent)?;
    let distinct: BTreeSet<&String> = list_e.iter().collect();
    report.metric("expert_overlap", Ok(c.overlap as f64));
    report.metric("expert_new", Ok(c.new as f64));
    report.metric("expert_missing", Ok(c.missing as f64));
    report.metric("expert_list_size", Ok(distinct.len() as f64));
    Ok(c)
}
