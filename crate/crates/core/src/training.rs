//! Matcher training: cross-entropy against random negatives, and the
//! margin hinge driven by normalized weak signals (plus its ablations).

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::{debug, info};
use rand::seq::{index::sample, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::corpus::{Exchange, TokenId};
use crate::error::{Error, Result};
use crate::eval::{EvalRecord, Metrics};
use crate::index::{Candidate, CandidateSet, Source};
use crate::matchers::MatcherModel;

const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    BceRandom,
    Ws,
    WsConst,
    WsRand,
}

impl Objective {
    pub const ALL: [Objective; 4] = [Objective::BceRandom, Objective::Ws, Objective::WsConst, Objective::WsRand];

    /// Hinge objectives that fine-tune a cross-entropy-pretrained model.
    pub fn is_weak_family(self) -> bool {
        self != Objective::BceRandom
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Objective::BceRandom => "bce_random",
            Objective::Ws => "ws",
            Objective::WsConst => "ws_const",
            Objective::WsRand => "ws_rand",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown objective `{s}` (expected bce_random, ws, ws_const or ws_rand)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub objective: Objective,
    pub learning_rate: f64,
    /// Candidate sets per SGD step.
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Constant margin for `ws_const`.
    pub epsilon: Option<f64>,
    /// Only consulted for `bce_random`; the hinge objectives always freeze.
    pub freeze_embeddings: bool,
    pub seed: u64,
    pub n: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::BceRandom,
            learning_rate: 0.1,
            batch_size: 2,
            max_epochs: 10,
            epsilon: None,
            freeze_embeddings: false,
            seed: 7,
            n: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bad.push(format!("learning_rate {} must be > 0", self.learning_rate));
        }
        if self.batch_size < 1 {
            bad.push("batch_size must be >= 1".to_string());
        }
        if self.n < 2 {
            bad.push(format!("n {} must be >= 2", self.n));
        }
        match (self.objective, self.epsilon) {
            (Objective::WsConst, None) => bad.push("ws_const needs epsilon".to_string()),
            (_, Some(e)) if !(e > 0.0 && e < 1.0) => bad.push(format!("epsilon {e} must lie in (0, 1)")),
            _ => {}
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn margin_source(&self) -> MarginSource {
        match (self.objective, self.epsilon) {
            (Objective::WsConst, Some(e)) => MarginSource::Const(e),
            _ => MarginSource::Weak,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub loss: f64,
    pub val_p_at_1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub objective: Objective,
    pub epochs: Vec<EpochReport>,
    /// 1-based index into `epochs`; 0 when no epoch ran.
    pub best_epoch: usize,
    pub seed: u64,
    pub wall_seconds: f64,
}

/// Each exchange's human response followed by `n - 1` responses of other
/// exchanges drawn uniformly without replacement.
pub fn sample_random_negatives(corpus: &[Exchange], n: usize, seed: u64) -> Result<Vec<CandidateSet>> {
    if n < 2 {
        return Err(Error::Config(format!("candidate count {n} must be >= 2")));
    }
    if corpus.len() < n {
        return Err(Error::Contract(format!(
            "corpus of {} exchanges cannot supply {} candidates per set",
            corpus.len(),
            n
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(corpus
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut human = Candidate::new(ex.response.clone(), Source::Human);
            human.label = Some(1);
            let mut candidates = vec![human];
            // draw from the corpus minus position i by shifting indices past it
            for k in sample(&mut rng, corpus.len() - 1, n - 1) {
                let j = if k >= i { k + 1 } else { k };
                let mut c = Candidate::new(corpus[j].response.clone(), Source::Random);
                c.label = Some(0);
                candidates.push(c);
            }
            CandidateSet {
                input_id: ex.id.clone(),
                input: ex.input(),
                candidates,
            }
        })
        .collect())
}

/// Where the hinge margins come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MarginSource {
    Weak,
    Const(f64),
}

/// Margins `m_2..m_n` for one set.
pub fn margins(set: &CandidateSet, source: MarginSource) -> Result<Vec<f64>> {
    set.candidates[1..]
        .iter()
        .map(|c| match source {
            MarginSource::Const(e) => Ok(e),
            MarginSource::Weak => c.normalized.ok_or_else(|| {
                Error::Contract(format!("candidate set {} lacks normalized weak signals", set.input_id))
            }),
        })
        .collect()
}

/// Binary labels for one set: the stored label, else 1 for the human only.
fn labels(set: &CandidateSet) -> Vec<f64> {
    set.candidates
        .iter()
        .map(|c| match c.label {
            Some(l) => f64::from(l),
            None => f64::from(u8::from(c.source == Source::Human)),
        })
        .collect()
}

/// Sum of per-set cross-entropy `-sum_j [r log M + (1 - r) log(1 - M)]` with
/// `M` clamped inside the logs. `m` is `[rows, 1]`, `r` aligned with it.
pub fn bce_loss(g: &mut Graph<'_>, m: Var, r: &[f64]) -> Result<Var> {
    let clamped = g.clamp(m, BCE_CLAMP, 1.0 - BCE_CLAMP);
    let log_m = g.log(clamped);
    let neg = g.scale(clamped, -1.0);
    let one_minus = g.offset(neg, 1.0);
    let log_one_minus = g.log(one_minus);
    let r_col = g.input(Tensor::column(r.to_vec())?);
    let not_r = g.input(Tensor::column(r.iter().map(|v| 1.0 - v).collect())?);
    let a = g.mul(r_col, log_m)?;
    let b = g.mul(not_r, log_one_minus)?;
    let ll = g.add(a, b)?;
    let total = g.reduce_sum(ll);
    Ok(g.scale(total, -1.0))
}

/// Sum of hinge terms `max(0, M_j - M_human + m_j)`. `pos[k]` and `neg[k]`
/// index rows of `m` for each term and `margin[k]` is its required margin.
pub fn ws_loss(g: &mut Graph<'_>, m: Var, pos: &[usize], neg: &[usize], margin: &[f64]) -> Result<Var> {
    if pos.len() != neg.len() || neg.len() != margin.len() {
        return Err(Error::Contract("hinge index lists differ in length".into()));
    }
    let p = g.embedding_lookup(m, pos)?;
    let q = g.embedding_lookup(m, neg)?;
    let diff = g.sub(q, p)?;
    let mcol = g.input(Tensor::column(margin.to_vec())?);
    let shifted = g.add(diff, mcol)?;
    let hinge = g.relu(shifted);
    Ok(g.reduce_sum(hinge))
}

/// Scalar cross-entropy of one set given its matching degrees.
pub fn bce_loss_value(scores: &[f64], labels: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let m = g.input(Tensor::column(scores.to_vec())?);
    let loss = bce_loss(&mut g, m, labels)?;
    Ok(g.scalar(loss))
}

/// Scalar hinge loss of one set; `scores[0]` is the human response.
pub fn ws_loss_value(scores: &[f64], margins: &[f64]) -> Result<f64> {
    if scores.len() != margins.len() + 1 {
        return Err(Error::Contract("need one margin per non-human candidate".into()));
    }
    let mut g = Graph::new();
    let m = g.input(Tensor::column(scores.to_vec())?);
    let neg: Vec<usize> = (1..scores.len()).collect();
    let loss = ws_loss(&mut g, m, &vec![0; neg.len()], &neg, margins)?;
    Ok(g.scalar(loss))
}

/// Scores a batch of sets in one forward pass; returns the `[rows, 1]` node
/// and the row offset of each set.
fn forward_sets(model: &MatcherModel, g: &mut Graph<'_>, sets: &[&CandidateSet]) -> Result<(Var, Vec<usize>)> {
    let xs: Vec<&[TokenId]> = sets.iter().map(|s| s.input.ids()).collect();
    let mut ys = Vec::new();
    let mut owner = Vec::new();
    let mut offsets = Vec::with_capacity(sets.len());
    for (i, set) in sets.iter().enumerate() {
        offsets.push(ys.len());
        for c in &set.candidates {
            ys.push(c.response.ids());
            owner.push(i);
        }
    }
    Ok((model.forward(g, &xs, &ys, &owner)?, offsets))
}

/// Mean per-set loss of a minibatch under `objective`.
pub fn batch_loss(
    model: &MatcherModel,
    g: &mut Graph<'_>,
    sets: &[&CandidateSet],
    objective: Objective,
    source: MarginSource,
) -> Result<Var> {
    let (m, offsets) = forward_sets(model, g, sets)?;
    let total = if objective.is_weak_family() {
        let (mut pos, mut neg, mut margin) = (Vec::new(), Vec::new(), Vec::new());
        for (set, &off) in sets.iter().zip(&offsets) {
            let ms = margins(set, source)?;
            for (j, mj) in ms.into_iter().enumerate() {
                pos.push(off);
                neg.push(off + 1 + j);
                margin.push(mj);
            }
        }
        ws_loss(g, m, &pos, &neg, &margin)?
    } else {
        let r: Vec<f64> = sets.iter().flat_map(|s| labels(s)).collect();
        bce_loss(g, m, &r)?
    };
    Ok(g.scale(total, 1.0 / sets.len() as f64))
}

/// Validation P@1 with the human response as the only relevant candidate,
/// listed last so a tie never counts in its favour.
pub fn validation_p_at_1(model: &MatcherModel, sets: &[CandidateSet]) -> Result<f64> {
    let mut records = Vec::with_capacity(sets.len());
    for chunk in sets.chunks(32) {
        let refs: Vec<&CandidateSet> = chunk.iter().collect();
        let mut g = Graph::with_params(&model.params);
        let (m, offsets) = forward_sets(model, &mut g, &refs)?;
        let scores = g.value(m).data();
        for (set, &off) in chunk.iter().zip(&offsets) {
            let s = &scores[off..off + set.n()];
            let mut ordered: Vec<f64> = s[1..].to_vec();
            ordered.push(s[0]);
            let mut rel = vec![false; set.n()];
            rel[set.n() - 1] = true;
            records.push(EvalRecord::new(set.input_id.clone(), &ordered, &rel));
        }
    }
    Ok(Metrics::compute(&records).p_at_1)
}

/// Trains `model` on `data` and returns the best-validation snapshot.
///
/// Hinge objectives require a model whose history starts with
/// `bce_random`; their embeddings stay frozen throughout.
pub fn train(
    mut model: MatcherModel,
    data: &[CandidateSet],
    config: &TrainConfig,
    validation: &[CandidateSet],
) -> Result<(MatcherModel, TrainReport)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    if validation.is_empty() {
        return Err(Error::Empty("validation data"));
    }
    for set in data {
        set.validate()?;
    }
    let objective = config.objective;
    if objective.is_weak_family() && model.history.first().map(String::as_str) != Some("bce_random") {
        return Err(Error::Contract(format!(
            "objective {objective} must start from a matcher pretrained with bce_random; \
             pass a cross-entropy snapshot as the initial model"
        )));
    }
    let source = config.margin_source();
    if source == MarginSource::Weak && objective.is_weak_family() {
        for set in data {
            margins(set, source)?;
        }
    }
    let started = Instant::now();
    let mut report = TrainReport {
        objective,
        epochs: Vec::new(),
        best_epoch: 0,
        seed: config.seed,
        wall_seconds: 0.0,
    };
    if config.max_epochs == 0 {
        return Ok((model, report));
    }
    let was_trainable = model.params.is_trainable("embedding");
    let freeze = objective.is_weak_family() || config.freeze_embeddings;
    model.freeze_embeddings(freeze)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut best: Option<(f64, MatcherModel)> = None;
    for epoch in 1..=config.max_epochs {
        let epoch_start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let sets: Vec<&CandidateSet> = chunk.iter().map(|&i| &data[i]).collect();
            let grads = {
                let mut g = Graph::with_params(&model.params);
                let loss = batch_loss(&model, &mut g, &sets, objective, source)?;
                loss_sum += g.scalar(loss);
                g.backward(loss)?
            };
            model.params.sgd_step(&grads, config.learning_rate)?;
            steps += 1;
        }
        let loss = loss_sum / steps as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite);
        }
        let val = validation_p_at_1(&model, validation)?;
        debug!(
            "{objective} epoch {epoch}: loss {loss:.5}, val P@1 {val:.4} ({:.1}s)",
            epoch_start.elapsed().as_secs_f64()
        );
        report.epochs.push(EpochReport { loss, val_p_at_1: val });
        if best.as_ref().is_none_or(|(b, _)| val > *b) {
            best = Some((val, model.clone()));
            report.best_epoch = epoch;
        }
    }
    let (best_val, mut model) = best.expect("at least one epoch ran");
    info!("{objective}: best epoch {} with val P@1 {best_val:.4}", report.best_epoch);
    model.freeze_embeddings(!was_trainable)?;
    model.history.push(objective.as_str().to_string());
    report.wall_seconds = started.elapsed().as_secs_f64();
    Ok((model, report))
}
