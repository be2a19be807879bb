//! Matching models `M(x, y)` in (0, 1): a dual recurrent encoder with a
//! bilinear read-out, and a width-3 convolutional matcher.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParameterStore, Tensor, Var};
use crate::corpus::{TokenId, PAD};
use crate::error::{Error, Result};
use crate::nn::{uniform, CellKind, PaddedBatch, RecurrentLayer};

pub const CNN_WIDTH: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    DualRnn,
    Cnn,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::DualRnn => "dual_rnn",
            Architecture::Cnn => "cnn",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual_rnn" => Ok(Architecture::DualRnn),
            "cnn" => Ok(Architecture::Cnn),
            other => Err(Error::Config(format!(
                "unknown matcher architecture `{other}` (expected dual_rnn or cnn)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatcherConfig {
    pub arch: Architecture,
    pub embedding_size: usize,
    pub hidden_size: usize,
    pub filters: usize,
    /// Recurrent cell of the dual encoder.
    pub cell: CellKind,
    pub seed: u64,
    pub init_scale: f64,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::DualRnn,
            embedding_size: 32,
            hidden_size: 32,
            filters: 16,
            cell: CellKind::Gru,
            seed: 7,
            init_scale: 0.5,
        }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, v) in [
            ("embedding_size", self.embedding_size),
            ("hidden_size", self.hidden_size),
            ("filters", self.filters),
        ] {
            if v < 1 {
                bad.push(format!("{name} must be >= 1"));
            }
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            bad.push(format!("init_scale {} must be finite and >= 0", self.init_scale));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatcherModel {
    pub config: MatcherConfig,
    pub vocab_size: usize,
    pub params: ParameterStore,
    /// Objectives this model has been trained with, oldest first.
    pub history: Vec<String>,
}

impl MatcherModel {
    /// Fresh model; the read-out (bilinear form or final layer) starts at zero
    /// so every pair initially scores exactly 0.5.
    pub fn new(config: MatcherConfig, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        if vocab_size < 5 {
            return Err(Error::Config(format!("vocabulary of {vocab_size} is too small")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (e, h, s) = (config.embedding_size, config.hidden_size, config.init_scale);
        let mut params = ParameterStore::new();
        params.insert("embedding", uniform(&[vocab_size, e], s, &mut rng), true)?;
        match config.arch {
            Architecture::DualRnn => {
                RecurrentLayer::new("x_encoder", config.cell, e, h).init_params(&mut params, s, &mut rng)?;
                RecurrentLayer::new("y_encoder", config.cell, e, h).init_params(&mut params, s, &mut rng)?;
                params.insert("bilinear.w", Tensor::zeros(&[h, h]), true)?;
                params.insert("bilinear.b", Tensor::zeros(&[1, 1]), true)?;
            }
            Architecture::Cnn => {
                let f = config.filters;
                for side in ["x_conv", "y_conv"] {
                    params.insert(format!("{side}.w"), uniform(&[CNN_WIDTH * e, f], s, &mut rng), true)?;
                    params.insert(format!("{side}.b"), Tensor::zeros(&[f]), true)?;
                }
                params.insert("hidden.w", uniform(&[2 * f, h], s, &mut rng), true)?;
                params.insert("hidden.b", Tensor::zeros(&[h]), true)?;
                params.insert("output.w", Tensor::zeros(&[h, 1]), true)?;
                params.insert("output.b", Tensor::zeros(&[1, 1]), true)?;
            }
        }
        Ok(Self {
            config,
            vocab_size,
            params,
            history: Vec::new(),
        })
    }

    pub fn arch(&self) -> Architecture {
        self.config.arch
    }

    /// Matching degrees `[ys.len(), 1]` where `ys[j]` is paired with
    /// `xs[owner[j]]`. Each distinct input is encoded once.
    pub fn forward(&self, g: &mut Graph<'_>, xs: &[&[TokenId]], ys: &[&[TokenId]], owner: &[usize]) -> Result<Var> {
        if ys.len() != owner.len() {
            return Err(Error::Contract("owner list does not match candidates".into()));
        }
        if let Some(&bad) = owner.iter().find(|&&o| o >= xs.len()) {
            return Err(Error::Contract(format!("candidate owner {bad} out of range")));
        }
        let logits = match self.config.arch {
            Architecture::DualRnn => self.dual_rnn_logits(g, xs, ys, owner)?,
            Architecture::Cnn => self.cnn_logits(g, xs, ys, owner)?,
        };
        Ok(g.sigmoid(logits))
    }

    fn dual_rnn_logits(&self, g: &mut Graph<'_>, xs: &[&[TokenId]], ys: &[&[TokenId]], owner: &[usize]) -> Result<Var> {
        let (e, h) = (self.config.embedding_size, self.config.hidden_size);
        let emb = g.param("embedding")?;
        let encode = |g: &mut Graph<'_>, name: &str, seqs: &[&[TokenId]]| -> Result<Var> {
            let batch = PaddedBatch::new(seqs)?;
            let embedded = g.embedding_lookup(emb, &batch.ids)?;
            let layer = RecurrentLayer::new(name, self.config.cell, e, h);
            Ok(layer.encode(g, embedded, &batch)?.last.h)
        };
        let hx = encode(g, "x_encoder", xs)?;
        let hy = encode(g, "y_encoder", ys)?;
        let w = g.param("bilinear.w")?;
        let b = g.param("bilinear.b")?;
        let v = g.matmul(hx, w)?;
        let v = gather_rows(g, v, owner)?;
        let prod = g.mul(v, hy)?;
        let dot = g.sum_cols(prod);
        g.add(dot, b)
    }

    fn cnn_logits(&self, g: &mut Graph<'_>, xs: &[&[TokenId]], ys: &[&[TokenId]], owner: &[usize]) -> Result<Var> {
        let px = self.conv_pool(g, "x_conv", xs)?;
        let py = self.conv_pool(g, "y_conv", ys)?;
        let px = gather_rows(g, px, owner)?;
        let joint = g.concat_cols(&[px, py])?;
        let hw = g.param("hidden.w")?;
        let hb = g.param("hidden.b")?;
        let hidden = g.matmul(joint, hw)?;
        let hidden = g.add(hidden, hb)?;
        let hidden = g.relu(hidden);
        let ow = g.param("output.w")?;
        let ob = g.param("output.b")?;
        let out = g.matmul(hidden, ow)?;
        g.add(out, ob)
    }

    /// Width-3 relu convolution and max-over-time pooling, one row per sequence.
    fn conv_pool(&self, g: &mut Graph<'_>, side: &str, seqs: &[&[TokenId]]) -> Result<Var> {
        let mut shifted: [Vec<usize>; CNN_WIDTH] = Default::default();
        let mut segments = Vec::with_capacity(seqs.len());
        for seq in seqs {
            let windows = conv_windows(seq)?;
            let start = shifted[0].len();
            for w in &windows {
                for (k, &id) in w.iter().enumerate() {
                    shifted[k].push(id as usize);
                }
            }
            segments.push((start, start + windows.len()));
        }
        let emb = g.param("embedding")?;
        let mut parts = Vec::with_capacity(CNN_WIDTH);
        for ids in &shifted {
            parts.push(g.embedding_lookup(emb, ids)?);
        }
        let windows = g.concat_cols(&parts)?;
        let w = g.param(&format!("{side}.w"))?;
        let b = g.param(&format!("{side}.b"))?;
        let conv = g.matmul(windows, w)?;
        let conv = g.add(conv, b)?;
        let conv = g.relu(conv);
        g.reduce_max(conv, &segments)
    }

    /// `M(x, y)`.
    pub fn score(&self, x: &[TokenId], y: &[TokenId]) -> Result<f64> {
        Ok(self.score_candidates(x, &[y])?[0])
    }

    pub fn score_candidates(&self, x: &[TokenId], ys: &[&[TokenId]]) -> Result<Vec<f64>> {
        self.score_batch(&[x], ys, &vec![0; ys.len()])
    }

    pub fn score_batch(&self, xs: &[&[TokenId]], ys: &[&[TokenId]], owner: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::with_params(&self.params);
        let m = self.forward(&mut g, xs, ys, owner)?;
        Ok(g.value(m).data().to_vec())
    }

    /// Stops gradient flow into the word embeddings.
    pub fn freeze_embeddings(&mut self, frozen: bool) -> Result<()> {
        self.params.set_trainable("embedding", !frozen)
    }

    fn header(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "matcher",
            "arch": self.config.arch,
            "vocab_size": self.vocab_size,
            "config": self.config,
            "history": self.history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path, &self.header())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, header) = ParameterStore::load(path)?;
        if header["kind"] != "matcher" {
            return Err(Error::Format(format!("{} is not a matcher model", path.display())));
        }
        if let Some(tag) = header["arch"].as_str() {
            tag.parse::<Architecture>()?;
        }
        let config: MatcherConfig = serde_json::from_value(header["config"].clone())
            .map_err(|e| Error::Config(format!("matcher header in {}: {e}", path.display())))?;
        let vocab_size = header["vocab_size"]
            .as_u64()
            .ok_or_else(|| Error::Format("matcher header lacks vocab_size".into()))? as usize;
        let history = serde_json::from_value(header["history"].clone()).unwrap_or_default();
        Ok(Self {
            config,
            vocab_size,
            params,
            history,
        })
    }
}

/// Dispatches on the model's architecture tag.
pub fn matcher_score(model: &MatcherModel, x: &[TokenId], y: &[TokenId]) -> Result<f64> {
    model.score(x, y)
}

fn gather_rows(g: &mut Graph<'_>, v: Var, owner: &[usize]) -> Result<Var> {
    if owner.iter().enumerate().all(|(j, &o)| o == j) && g.value(v).rows() == owner.len() {
        Ok(v)
    } else {
        g.embedding_lookup(v, owner)
    }
}

/// Convolution windows for one sequence: trailing PAD is stripped, then one
/// window starts at each remaining token, right-padded with PAD. Appending PAD
/// therefore never changes the pooled features.
pub fn conv_windows(seq: &[TokenId]) -> Result<Vec<[TokenId; CNN_WIDTH]>> {
    let end = seq.iter().rposition(|&t| t != PAD).map_or(0, |p| p + 1);
    if end == 0 {
        return Err(Error::Empty("sequence"));
    }
    let body = &seq[..end];
    Ok((0..end)
        .map(|i| std::array::from_fn(|k| body.get(i + k).copied().unwrap_or(PAD)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradient_check, GradCheckOptions};

    fn config(arch: Architecture) -> MatcherConfig {
        MatcherConfig {
            arch,
            embedding_size: 4,
            hidden_size: 3,
            filters: 3,
            seed: 5,
            init_scale: 0.5,
            ..MatcherConfig::default()
        }
    }

    fn randomize_readout(model: &mut MatcherModel) {
        for name in ["bilinear.w", "bilinear.b", "output.w", "output.b", "hidden.b", "x_conv.b", "y_conv.b"] {
            if let Some(t) = model.params.get_mut(name) {
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    *v = 0.37 * ((i * 7 % 5) as f64) - 0.6;
                }
            }
        }
    }

    #[test]
    fn fresh_models_score_one_half() {
        for arch in [Architecture::DualRnn, Architecture::Cnn] {
            let m = MatcherModel::new(config(arch), 10).unwrap();
            assert_eq!(m.score(&[4, 5, 6], &[7]).unwrap(), 0.5);
            assert_eq!(matcher_score(&m, &[9], &[4, 4, 4, 4]).unwrap(), 0.5);
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = MatcherModel::new(config(Architecture::Cnn), 10).unwrap();
        let b = MatcherModel::new(config(Architecture::Cnn), 10).unwrap();
        assert_eq!(a, b);
        let zero = MatcherModel::new(
            MatcherConfig {
                init_scale: 0.0,
                ..config(Architecture::DualRnn)
            },
            10,
        )
        .unwrap();
        assert!(zero.params.iter().all(|p| p.value.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn unknown_architecture_is_a_config_error() {
        assert!(matches!("lstm".parse::<Architecture>(), Err(Error::Config(_))));
        assert_eq!("dual_rnn".parse::<Architecture>().unwrap(), Architecture::DualRnn);
    }

    #[test]
    fn empty_sequences_are_rejected() {
        for arch in [Architecture::DualRnn, Architecture::Cnn] {
            let m = MatcherModel::new(config(arch), 10).unwrap();
            assert!(m.score(&[], &[4]).is_err());
            assert!(m.score(&[4], &[]).is_err());
        }
    }

    #[test]
    fn cnn_ignores_trailing_pad() {
        let mut m = MatcherModel::new(config(Architecture::Cnn), 10).unwrap();
        randomize_readout(&mut m);
        let a = m.score(&[4, 5, 6], &[7, 8]).unwrap();
        let b = m.score(&[4, 5, 6, PAD], &[7, 8, PAD, PAD, PAD]).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, 0.5);
    }

    #[test]
    fn cnn_is_sensitive_to_window_order() {
        let mut m = MatcherModel::new(config(Architecture::Cnn), 12).unwrap();
        randomize_readout(&mut m);
        let y = [4, 5, 6, 7, 8, 9];
        let swapped = [7, 8, 9, 4, 5, 6];
        let windows = |s: &[u32]| {
            let mut w = conv_windows(s).unwrap();
            w.sort();
            w
        };
        assert_ne!(windows(&y), windows(&swapped));
        assert_ne!(m.score(&[4, 10], &y).unwrap(), m.score(&[4, 10], &swapped).unwrap());
    }

    #[test]
    fn batched_scoring_matches_single_pairs() {
        for arch in [Architecture::DualRnn, Architecture::Cnn] {
            let mut m = MatcherModel::new(config(arch), 12).unwrap();
            randomize_readout(&mut m);
            let xs: [&[u32]; 2] = [&[4, 5, 6, 3, 7], &[8]];
            let ys: [&[u32]; 3] = [&[9, 10], &[11, 4, 5, 6], &[7]];
            let owner = [0, 1, 0];
            let batched = m.score_batch(&xs, &ys, &owner).unwrap();
            for j in 0..3 {
                let single = m.score(xs[owner[j]], ys[j]).unwrap();
                assert_eq!(single, batched[j], "{arch} candidate {j}");
                assert!(single > 0.0 && single < 1.0);
            }
        }
    }

    #[test]
    fn architectures_pass_gradient_check() {
        for arch in [Architecture::DualRnn, Architecture::Cnn] {
            let mut m = MatcherModel::new(config(arch), 12).unwrap();
            randomize_readout(&mut m);
            let report = gradient_check(
                &m.params,
                |g| {
                    let xs: [&[u32]; 2] = [&[4, 5, 6], &[7, 8]];
                    let ys: [&[u32]; 3] = [&[9, 10, 11], &[5], &[6, 4]];
                    let p = m.forward(g, &xs, &ys, &[0, 0, 1])?;
                    let lp = g.log(p);
                    Ok(g.reduce_sum(lp))
                },
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(report.max_relative_error < 1e-4, "{arch}: {report:?}");
        }
    }

    #[test]
    fn model_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let mut m = MatcherModel::new(config(Architecture::Cnn), 10).unwrap();
        m.history.push("bce_random".into());
        m.save(&path).unwrap();
        assert_eq!(MatcherModel::load(&path).unwrap(), m);
    }
}
