//! Ranking metrics (P@1, MAP, MRR), test-record construction and the
//! two-feature pairwise ranker used for score fusion.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Exchange, RelevanceOracle, TokenId, Utterance, Vocabulary};
use crate::error::{Error, Result};
use crate::index::InvertedIndex;
use crate::matchers::MatcherModel;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub query_id: String,
    /// `(score, relevant)` in original candidate order.
    pub candidates: Vec<(f64, bool)>,
}

impl EvalRecord {
    pub fn new(query_id: impl Into<String>, scores: &[f64], relevance: &[bool]) -> Self {
        Self {
            query_id: query_id.into(),
            candidates: scores.iter().copied().zip(relevance.iter().copied()).collect(),
        }
    }

    pub fn has_relevant(&self) -> bool {
        self.candidates.iter().any(|&(_, r)| r)
    }

    /// Relevance flags in ranked order.
    pub fn ranked_relevance(&self) -> Vec<bool> {
        let scores: Vec<f64> = self.candidates.iter().map(|c| c.0).collect();
        rank(&scores).into_iter().map(|i| self.candidates[i].1).collect()
    }
}

/// Indices by descending score; ties keep their original order.
pub fn rank(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

pub fn average_precision(ranked: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &r) in ranked.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

pub fn reciprocal_rank(ranked: &[bool]) -> f64 {
    ranked
        .iter()
        .position(|&r| r)
        .map_or(0.0, |p| 1.0 / (p + 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub p_at_1: f64,
    pub map: f64,
    pub mrr: f64,
    /// Records that entered the means.
    pub n_queries: usize,
    /// Records without any relevant candidate; excluded from all three means.
    pub n_skipped: usize,
}

impl Metrics {
    pub fn compute(records: &[EvalRecord]) -> Self {
        let (mut p1, mut ap, mut rr, mut used) = (0.0, 0.0, 0.0, 0usize);
        for record in records.iter().filter(|r| r.has_relevant()) {
            let ranked = record.ranked_relevance();
            p1 += if ranked[0] { 1.0 } else { 0.0 };
            ap += average_precision(&ranked);
            rr += reciprocal_rank(&ranked);
            used += 1;
        }
        let mean = |x: f64| if used == 0 { 0.0 } else { x / used as f64 };
        Self {
            p_at_1: mean(p1),
            map: mean(ap),
            mrr: mean(rr),
            n_queries: used,
            n_skipped: records.len() - used,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize") + "\n"
    }
}

pub fn precision_at_1(records: &[EvalRecord]) -> f64 {
    Metrics::compute(records).p_at_1
}

pub fn mean_average_precision(records: &[EvalRecord]) -> f64 {
    Metrics::compute(records).map
}

pub fn mean_reciprocal_rank(records: &[EvalRecord]) -> f64 {
    Metrics::compute(records).mrr
}

/// Linear two-feature ranker `w . [model_score, tfidf_cosine]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub w: [f64; 2],
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self { w: [1.0, 0.0] }
    }
}

impl FusionWeights {
    pub fn score(&self, features: [f64; 2]) -> f64 {
        self.w[0] * features[0] + self.w[1] * features[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 0.1,
            l2: 1e-4,
            seed: 7,
        }
    }
}

/// Per-query features `[model_score, tfidf]` with relevance flags.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub query_id: String,
    pub candidates: Vec<([f64; 2], bool)>,
}

impl FeatureRecord {
    pub fn fused(&self, weights: &FusionWeights) -> EvalRecord {
        EvalRecord {
            query_id: self.query_id.clone(),
            candidates: self
                .candidates
                .iter()
                .map(|&(f, r)| (weights.score(f), r))
                .collect(),
        }
    }
}

/// Pairwise-hinge training: every (relevant, irrelevant) pair inside a
/// validation record asks for `w . f+ >= w . f- + 1`.
pub fn train_fusion(validation: &[FeatureRecord], config: &FusionConfig) -> Result<FusionWeights> {
    let mut diffs: Vec<[f64; 2]> = Vec::new();
    for record in validation {
        for &(fp, rp) in &record.candidates {
            for &(fn_, rn) in &record.candidates {
                if rp && !rn {
                    diffs.push([fp[0] - fn_[0], fp[1] - fn_[1]]);
                }
            }
        }
    }
    if diffs.is_empty() {
        return Err(Error::Contract(
            "fusion needs at least one relevant/irrelevant pair in validation".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut weights = FusionWeights::default();
    let mut order: Vec<usize> = (0..diffs.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let d = diffs[i];
            let violated = weights.score(d) < 1.0;
            for k in 0..2 {
                let grad = config.l2 * weights.w[k] - if violated { d[k] } else { 0.0 };
                weights.w[k] -= config.learning_rate * grad;
            }
        }
    }
    Ok(weights)
}

/// Fuses test features with weights learned on the validation records.
pub fn fuse_scores(
    test: &[FeatureRecord],
    validation: &[FeatureRecord],
    config: &FusionConfig,
) -> Result<(Vec<EvalRecord>, FusionWeights)> {
    let weights = train_fusion(validation, config)?;
    Ok((test.iter().map(|r| r.fused(&weights)).collect(), weights))
}

/// A test query: input and labelled candidates, order as presented.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub query_id: String,
    pub input: Utterance,
    pub candidates: Vec<(Utterance, bool)>,
}

#[derive(Serialize, Deserialize)]
struct LabeledCandidateLine {
    text: String,
    label: u8,
}

#[derive(Serialize, Deserialize)]
struct LabeledSetLine {
    query_id: String,
    input: String,
    candidates: Vec<LabeledCandidateLine>,
}

/// Human response plus `k - 1` responses retrieved from `index`, all labelled
/// by the oracle and shuffled (seeded) so position carries no signal.
pub fn build_test_records(
    queries: &[Exchange],
    index: &InvertedIndex,
    oracle: &RelevanceOracle,
    vocab: &Vocabulary,
    k: usize,
    seed: u64,
) -> Result<Vec<LabeledSet>> {
    if k < 2 {
        return Err(Error::Config(format!("test candidate count {k} must be >= 2")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    queries
        .iter()
        .map(|ex| {
            let input = ex.input();
            let human = oracle.is_relevant_ids(vocab, &input, &ex.response);
            let mut candidates = vec![(ex.response.clone(), human)];
            for (doc, _) in index.retrieve(&input, k - 1, &HashSet::new()) {
                let response = index.doc(doc).expect("retrieved doc exists").response.clone();
                let response = Utterance(response);
                let relevant = oracle.is_relevant_ids(vocab, &input, &response);
                candidates.push((response, relevant));
            }
            candidates.shuffle(&mut rng);
            Ok(LabeledSet {
                query_id: ex.id.clone(),
                input,
                candidates,
            })
        })
        .collect()
}

pub fn write_labeled_sets(path: &Path, sets: &[LabeledSet], vocab: &Vocabulary) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for set in sets {
        let line = LabeledSetLine {
            query_id: set.query_id.clone(),
            input: vocab.decode(&set.input),
            candidates: set
                .candidates
                .iter()
                .map(|(u, r)| LabeledCandidateLine {
                    text: vocab.decode(u),
                    label: u8::from(*r),
                })
                .collect(),
        };
        let text = serde_json::to_string(&line).expect("eval record serializes");
        writeln!(out, "{text}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_labeled_sets(path: &Path, vocab: &Vocabulary) -> Result<Vec<LabeledSet>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut sets = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: LabeledSetLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if parsed.candidates.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                message: "record has no candidates".into(),
            });
        }
        let encode = |text: &str| vocab.encode_tokens(text.split_whitespace());
        let mut candidates = Vec::with_capacity(parsed.candidates.len());
        for c in &parsed.candidates {
            if c.label > 1 {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("label {} is not 0 or 1", c.label),
                });
            }
            candidates.push((encode(&c.text), c.label == 1));
        }
        sets.push(LabeledSet {
            query_id: parsed.query_id,
            input: encode(&parsed.input),
            candidates,
        });
    }
    Ok(sets)
}

/// Matcher scores and TF-IDF cosines for every candidate of every set.
pub fn feature_records(model: &MatcherModel, sets: &[LabeledSet], index: &InvertedIndex) -> Result<Vec<FeatureRecord>> {
    sets.iter()
        .map(|set| {
            let ys: Vec<&[TokenId]> = set.candidates.iter().map(|(u, _)| u.ids()).collect();
            let scores = model.score_candidates(set.input.ids(), &ys)?;
            Ok(FeatureRecord {
                query_id: set.query_id.clone(),
                candidates: set
                    .candidates
                    .iter()
                    .zip(scores)
                    .map(|((u, r), s)| ([s, index.tfidf_cosine(&set.input, u)], *r))
                    .collect(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions<'a> {
    /// When set, fuse with TF-IDF using a ranker trained on these records.
    pub fusion: Option<(&'a [LabeledSet], FusionConfig)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub fusion_weights: Option<FusionWeights>,
}

pub fn evaluate(
    model: &MatcherModel,
    sets: &[LabeledSet],
    index: &InvertedIndex,
    options: EvalOptions<'_>,
) -> Result<EvalReport> {
    if sets.is_empty() {
        return Err(Error::Empty("evaluation records"));
    }
    match options.fusion {
        None => {
            let records = sets
                .iter()
                .map(|set| {
                    let ys: Vec<&[TokenId]> = set.candidates.iter().map(|(u, _)| u.ids()).collect();
                    let scores = model.score_candidates(set.input.ids(), &ys)?;
                    let rel: Vec<bool> = set.candidates.iter().map(|c| c.1).collect();
                    Ok(EvalRecord::new(set.query_id.clone(), &scores, &rel))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(EvalReport {
                metrics: Metrics::compute(&records),
                fusion_weights: None,
            })
        }
        Some((validation, config)) => {
            let test = feature_records(model, sets, index)?;
            let val = feature_records(model, validation, index)?;
            let (records, weights) = fuse_scores(&test, &val, &config)?;
            Ok(EvalReport {
                metrics: Metrics::compute(&records),
                fusion_weights: Some(weights),
            })
        }
    }
}
