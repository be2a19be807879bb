//! The weak annotator: a small attention encoder-decoder whose teacher-forced
//! log-likelihood `s = sum_k log p(y_k | x, y_<k)` scores candidate responses,
//! plus the per-input normalization of those scores into margins.

use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, ParameterStore, Tensor, Var};
use crate::corpus::{RelevanceOracle, TokenId, Utterance, Vocabulary, BOS, EOS};
use crate::error::{Error, Result};
use crate::index::CandidateSet;
use crate::nn::{uniform, CellKind, PaddedBatch, RecurrentLayer};

/// Additive logit for padded encoder positions; its softmax weight is exactly 0.
const MASKED_LOGIT: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotatorConfig {
    pub embedding_size: usize,
    pub hidden_size: usize,
    pub cell: CellKind,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for AnnotatorConfig {
    fn default() -> Self {
        Self {
            embedding_size: 32,
            hidden_size: 32,
            cell: CellKind::Gru,
            init_scale: 0.3,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotatorTrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Stop after this many consecutive epochs without a lower validation perplexity.
    pub patience: usize,
    pub validation_fraction: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for AnnotatorTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            learning_rate: 1.0,
            max_epochs: 60,
            patience: 3,
            validation_fraction: 0.1,
            clip_norm: Some(5.0),
            seed: 7,
        }
    }
}

impl AnnotatorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.patience < 1 {
            problems.push("patience must be >= 1".to_string());
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            problems.push(format!(
                "validation_fraction {} must lie in (0, 1)",
                self.validation_fraction
            ));
        }
        if self.batch_size < 1 {
            problems.push("batch_size must be >= 1".to_string());
        }
        if !(self.learning_rate > 0.0) {
            problems.push("learning_rate must be > 0".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorEpoch {
    pub train_loss: f64,
    pub val_perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorReport {
    pub epochs: Vec<AnnotatorEpoch>,
    /// 1-based epoch of the returned snapshot; 0 when no epoch ran.
    pub best_epoch: usize,
    pub initial_val_perplexity: f64,
}

/// Parameters of the encoder-decoder annotator.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatorModel {
    pub config: AnnotatorConfig,
    pub vocab_size: usize,
    pub params: ParameterStore,
}

impl AnnotatorModel {
    pub fn new(config: AnnotatorConfig, vocab_size: usize) -> Result<Self> {
        if config.embedding_size < 1 || config.hidden_size < 1 || vocab_size < 5 {
            return Err(Error::Config(format!(
                "annotator sizes must be positive (embedding {}, hidden {}, vocab {vocab_size})",
                config.embedding_size, config.hidden_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (e, h, v, s) = (config.embedding_size, config.hidden_size, vocab_size, config.init_scale);
        let mut model = Self {
            config,
            vocab_size,
            params: ParameterStore::new(),
        };
        let params = &mut model.params;
        params.insert("embedding", uniform(&[v, e], s, &mut rng), true)?;
        RecurrentLayer::new("encoder", model.config.cell, e, h).init_params(params, s, &mut rng)?;
        RecurrentLayer::new("decoder", model.config.cell, e, h).init_params(params, s, &mut rng)?;
        params.insert("attention.w", uniform(&[h, h], s, &mut rng), true)?;
        params.insert("output.w", uniform(&[2 * h, v], s, &mut rng), true)?;
        params.insert("output.b", Tensor::zeros(&[v]), true)?;
        Ok(model)
    }

    fn encoder(&self) -> RecurrentLayer {
        RecurrentLayer::new(
            "encoder",
            self.config.cell,
            self.config.embedding_size,
            self.config.hidden_size,
        )
    }

    fn decoder(&self) -> RecurrentLayer {
        RecurrentLayer::new(
            "decoder",
            self.config.cell,
            self.config.embedding_size,
            self.config.hidden_size,
        )
    }

    /// Zeroes the output projection so every next-token distribution is uniform.
    pub fn zero_output_projection(&mut self) {
        for name in ["output.w", "output.b"] {
            if let Some(t) = self.params.get_mut(name) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Per-row teacher-forced log-likelihood `[batch, 1]` of `ys[b] + EOS`
    /// given `xs[b]`.
    pub fn log_likelihood(&self, g: &mut Graph<'_>, xs: &[&[TokenId]], ys: &[&[TokenId]]) -> Result<Var> {
        if xs.len() != ys.len() {
            return Err(Error::Contract("input and response batches differ in size".into()));
        }
        let src = PaddedBatch::new(xs)?;
        let dec_in: Vec<Vec<TokenId>> = ys
            .iter()
            .map(|y| std::iter::once(BOS).chain(y.iter().copied()).collect())
            .collect();
        let dec_in_refs: Vec<&[TokenId]> = dec_in.iter().map(Vec::as_slice).collect();
        let tgt = PaddedBatch::new(&dec_in_refs)?;
        let targets: Vec<Vec<usize>> = (0..tgt.steps)
            .map(|t| {
                ys.iter()
                    .map(|y| match t.cmp(&y.len()) {
                        std::cmp::Ordering::Less => y[t] as usize,
                        std::cmp::Ordering::Equal => EOS as usize,
                        std::cmp::Ordering::Greater => 0,
                    })
                    .collect()
            })
            .collect();

        let emb = g.param("embedding")?;
        let x_emb = g.embedding_lookup(emb, &src.ids)?;
        let enc = self.encoder().encode(g, x_emb, &src)?;

        let attn_w = g.param("attention.w")?;
        let out_w = g.param("output.w")?;
        let out_b = g.param("output.b")?;
        let src_mask = if (0..src.steps).all(|t| src.all_valid_at(t)) {
            None
        } else {
            let mut data = Vec::with_capacity(src.batch * src.steps);
            for &len in &src.lengths {
                data.extend((0..src.steps).map(|k| if k < len { 0.0 } else { MASKED_LOGIT }));
            }
            Some(g.input(Tensor::matrix(src.batch, src.steps, data)?))
        };

        let decoder = self.decoder();
        let y_emb = g.embedding_lookup(emb, &tgt.ids)?;
        let projected = decoder.project(g, y_emb)?;
        let mut state = enc.last;
        let mut total: Option<Var> = None;
        for (t, target) in targets.iter().enumerate() {
            let x_t = if tgt.steps == 1 {
                projected
            } else {
                g.slice_rows(projected, t * tgt.batch, (t + 1) * tgt.batch)?
            };
            state = decoder.step(g, x_t, state)?;
            let d = state.h;

            // bilinear attention: e_k = d W_a h_k
            let q = g.matmul(d, attn_w)?;
            let mut energies = Vec::with_capacity(enc.states.len());
            for &h_k in &enc.states {
                let prod = g.mul(q, h_k)?;
                energies.push(g.sum_cols(prod));
            }
            let mut e = g.concat_cols(&energies)?;
            if let Some(mask) = src_mask {
                e = g.add(e, mask)?;
            }
            let a = g.softmax(e);
            let mut context: Option<Var> = None;
            for (k, &h_k) in enc.states.iter().enumerate() {
                let a_k = g.slice_cols(a, k, k + 1)?;
                let weighted = g.mul(a_k, h_k)?;
                context = Some(match context {
                    None => weighted,
                    Some(c) => g.add(c, weighted)?,
                });
            }
            let context = context.expect("non-empty source");

            let features = g.concat_cols(&[d, context])?;
            let logits = g.matmul(features, out_w)?;
            let logits = g.add(logits, out_b)?;
            let logp = g.log_softmax(logits);
            let mut picked = g.pick(logp, target)?;
            if !tgt.all_valid_at(t) {
                let m = g.input(tgt.mask_at(t));
                picked = g.mul(picked, m)?;
            }
            total = Some(match total {
                None => picked,
                Some(acc) => g.add(acc, picked)?,
            });
        }
        Ok(total.expect("at least one decoder step"))
    }

    /// `s(x, y)`: log-likelihood of `y` followed by EOS, in nats.
    pub fn score(&self, x: &[TokenId], y: &[TokenId]) -> Result<f64> {
        Ok(self.score_candidates(x, &[y])?[0])
    }

    /// Scores every candidate against the same input in one batch.
    pub fn score_candidates(&self, x: &[TokenId], ys: &[&[TokenId]]) -> Result<Vec<f64>> {
        if x.is_empty() {
            return Err(Error::Empty("annotator input"));
        }
        if ys.iter().any(|y| y.is_empty()) {
            return Err(Error::Empty("candidate response"));
        }
        let xs = vec![x; ys.len()];
        let mut g = Graph::with_params(&self.params);
        let ll = self.log_likelihood(&mut g, &xs, ys)?;
        Ok(g.value(ll).data().to_vec())
    }

    /// exp of the mean per-token negative log-likelihood (EOS included).
    pub fn perplexity(&self, pairs: &[(Utterance, Utterance)], batch_size: usize) -> Result<f64> {
        let mut nll = 0.0;
        let mut tokens = 0usize;
        for chunk in pairs.chunks(batch_size.max(1)) {
            let xs: Vec<&[TokenId]> = chunk.iter().map(|(x, _)| x.ids()).collect();
            let ys: Vec<&[TokenId]> = chunk.iter().map(|(_, y)| y.ids()).collect();
            let mut g = Graph::with_params(&self.params);
            let ll = self.log_likelihood(&mut g, &xs, &ys)?;
            nll -= g.value(ll).data().iter().sum::<f64>();
            tokens += ys.iter().map(|y| y.len() + 1).sum::<usize>();
        }
        Ok((nll / tokens as f64).exp())
    }

    fn header(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "annotator",
            "vocab_size": self.vocab_size,
            "config": self.config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path, &self.header())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, header) = ParameterStore::load(path)?;
        if header["kind"] != "annotator" {
            return Err(Error::Format(format!("{} is not an annotator model", path.display())));
        }
        let config = serde_json::from_value(header["config"].clone())
            .map_err(|e| Error::Format(format!("annotator header: {e}")))?;
        let vocab_size = header["vocab_size"]
            .as_u64()
            .ok_or_else(|| Error::Format("annotator header lacks vocab_size".into()))?
            as usize;
        Ok(Self {
            config,
            vocab_size,
            params,
        })
    }
}

/// Pre-trains the annotator with teacher-forced cross-entropy and
/// validation-perplexity early stopping; returns the best snapshot.
pub fn train_annotator(
    pairs: &[(Utterance, Utterance)],
    vocab_size: usize,
    model_config: &AnnotatorConfig,
    config: &AnnotatorTrainConfig,
) -> Result<(AnnotatorModel, AnnotatorReport)> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::Empty("annotator training pairs"));
    }
    if pairs.len() < 2 {
        return Err(Error::Contract("annotator training needs at least 2 pairs".into()));
    }
    if pairs.iter().any(|(x, y)| x.is_empty() || y.is_empty()) {
        return Err(Error::Empty("annotator pair"));
    }
    let mut model = AnnotatorModel::new(model_config.clone(), vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((pairs.len() as f64 * config.validation_fraction).ceil() as usize).clamp(1, pairs.len() - 1);
    let val: Vec<(Utterance, Utterance)> = order[..n_val].iter().map(|&i| pairs[i].clone()).collect();
    let mut train: Vec<usize> = order[n_val..].to_vec();

    let initial = model.perplexity(&val, config.batch_size)?;
    let mut report = AnnotatorReport {
        epochs: Vec::new(),
        best_epoch: 0,
        initial_val_perplexity: initial,
    };
    let mut best = (initial, model.params.clone());
    let mut stale = 0usize;
    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        train.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in train.chunks(config.batch_size) {
            let xs: Vec<&[TokenId]> = chunk.iter().map(|&i| pairs[i].0.ids()).collect();
            let ys: Vec<&[TokenId]> = chunk.iter().map(|&i| pairs[i].1.ids()).collect();
            let tokens: usize = ys.iter().map(|y| y.len() + 1).sum();
            let mut grads: Gradients = {
                let mut g = Graph::with_params(&model.params);
                let ll = model.log_likelihood(&mut g, &xs, &ys)?;
                let total = g.reduce_sum(ll);
                let loss = g.scale(total, -1.0 / tokens as f64);
                loss_sum += g.scalar(loss);
                g.backward(loss)?
            };
            if let Some(c) = config.clip_norm {
                grads.clip_global_norm(c);
            }
            model.params.sgd_step(&grads, config.learning_rate)?;
            batches += 1;
        }
        let ppl = model.perplexity(&val, config.batch_size)?;
        let train_loss = loss_sum / batches.max(1) as f64;
        debug!(
            "annotator epoch {epoch}: loss {train_loss:.4}, val perplexity {ppl:.4} ({:.1}s)",
            started.elapsed().as_secs_f64()
        );
        report.epochs.push(AnnotatorEpoch {
            train_loss,
            val_perplexity: ppl,
        });
        if ppl < best.0 {
            best = (ppl, model.params.clone());
            report.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                info!("annotator early stop at epoch {epoch}, best epoch {}", report.best_epoch);
                break;
            }
        }
    }
    if report.best_epoch > 0 {
        model.params = best.1;
    }
    Ok((model, report))
}

/// Anything that can assign weak log-likelihood scores to candidates.
pub trait WeakScorer {
    fn score_candidates(&self, x: &[TokenId], ys: &[&[TokenId]]) -> Result<Vec<f64>>;
}

impl WeakScorer for AnnotatorModel {
    fn score_candidates(&self, x: &[TokenId], ys: &[&[TokenId]]) -> Result<Vec<f64>> {
        AnnotatorModel::score_candidates(self, x, ys)
    }
}

/// Ground-truth stand-in for the annotator on synthetic corpora:
/// `s = -1` for relevant pairs and `-(1 + gap)` otherwise.
#[derive(Debug, Clone)]
pub struct OracleAnnotator {
    pub oracle: RelevanceOracle,
    pub vocab: Vocabulary,
    pub gap: f64,
}

impl OracleAnnotator {
    pub fn new(oracle: RelevanceOracle, vocab: Vocabulary) -> Self {
        Self {
            oracle,
            vocab,
            gap: 9.0,
        }
    }

    pub fn with_gap(mut self, gap: f64) -> Self {
        self.gap = gap;
        self
    }
}

impl WeakScorer for OracleAnnotator {
    fn score_candidates(&self, x: &[TokenId], ys: &[&[TokenId]]) -> Result<Vec<f64>> {
        let input = Utterance(x.to_vec());
        Ok(ys
            .iter()
            .map(|y| {
                let relevant = self
                    .oracle
                    .is_relevant_ids(&self.vocab, &input, &Utterance(y.to_vec()));
                if relevant {
                    -1.0
                } else {
                    -(1.0 + self.gap)
                }
            })
            .collect())
    }
}

/// Fills every candidate's weak score `s`; order and everything else unchanged.
pub fn annotate(scorer: &dyn WeakScorer, sets: &[CandidateSet]) -> Result<Vec<CandidateSet>> {
    sets.iter()
        .map(|set| {
            let ys = set.responses();
            let scores = scorer.score_candidates(set.input.ids(), &ys)?;
            let mut out = set.clone();
            for (c, s) in out.candidates.iter_mut().zip(scores) {
                c.weak_score = Some(s);
            }
            Ok(out)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizeOptions {
    /// Upper bound applied after the ratio formula; `None` leaves margins uncapped.
    pub cap: Option<f64>,
}

impl Default for NormalizeOptions {
    fn default() -> Self {
        Self { cap: Some(1.0) }
    }
}

/// `s'_j = max(0, s_j / s_1 - 1)` against the human response's score `s_1`.
pub fn normalized_margins(scores: &[f64], options: NormalizeOptions) -> Result<Vec<f64>> {
    let Some(&human) = scores.first() else {
        return Err(Error::Empty("candidate scores"));
    };
    if human.abs() < 1e-12 {
        return Err(Error::DegenerateScore(human));
    }
    Ok(scores
        .iter()
        .enumerate()
        .map(|(j, &s)| {
            if j == 0 {
                return 0.0;
            }
            let m = (s / human - 1.0).max(0.0);
            match options.cap {
                Some(cap) => m.min(cap),
                None => m,
            }
        })
        .collect())
}

pub fn normalize_signals(set: &CandidateSet, options: NormalizeOptions) -> Result<CandidateSet> {
    let scores: Vec<f64> = set
        .candidates
        .iter()
        .map(|c| {
            c.weak_score.ok_or_else(|| {
                Error::Contract(format!("candidate set {} has unscored candidates", set.input_id))
            })
        })
        .collect::<Result<_>>()?;
    let margins = normalized_margins(&scores, options)?;
    let mut out = set.clone();
    for (c, m) in out.candidates.iter_mut().zip(margins) {
        c.normalized = Some(m);
    }
    Ok(out)
}

pub fn normalize_all(sets: &[CandidateSet], options: NormalizeOptions) -> Result<Vec<CandidateSet>> {
    sets.iter().map(|s| normalize_signals(s, options)).collect()
}
