//! End-to-end runs on a synthetic corpus: data preparation, the cross-entropy
//! baseline, weakly supervised fine-tuning, the ablation table and the
//! candidate-count sweep.

use log::info;
use serde::{Deserialize, Serialize};

use crate::annotator::{
    annotate, normalize_all, train_annotator, AnnotatorConfig, AnnotatorModel, AnnotatorReport,
    AnnotatorTrainConfig, NormalizeOptions, WeakScorer,
};
use crate::corpus::{
    generate_synthetic, Exchange, RawExchange, RelevanceOracle, SyntheticConfig, Utterance, Vocabulary,
};
use crate::error::{Error, Result};
use crate::eval::{build_test_records, evaluate, EvalOptions, LabeledSet, Metrics};
use crate::index::{construct_training_set, CandidateSet, InvertedIndex};
use crate::matchers::{MatcherConfig, MatcherModel};
use crate::training::{sample_random_negatives, train, Objective, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub synthetic: SyntheticConfig,
    pub train_size: usize,
    pub test_size: usize,
    /// Share of the training exchanges held out for matcher model selection.
    pub validation_fraction: f64,
    pub vocab_max: usize,
    pub n: usize,
    pub annotator: AnnotatorConfig,
    pub annotator_training: AnnotatorTrainConfig,
    pub matcher: MatcherConfig,
    /// Cross-entropy pretraining.
    pub baseline: TrainConfig,
    /// Hinge fine-tuning; `objective` and `epsilon` are set per run.
    pub fine_tune: TrainConfig,
    pub epsilon_grid: Vec<f64>,
    pub normalize: NormalizeOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticConfig::default(),
            train_size: 2000,
            test_size: 300,
            validation_fraction: 0.1,
            vocab_max: 2000,
            n: 10,
            annotator: AnnotatorConfig::default(),
            annotator_training: AnnotatorTrainConfig::default(),
            matcher: MatcherConfig::default(),
            baseline: TrainConfig::default(),
            fine_tune: TrainConfig {
                objective: Objective::Ws,
                max_epochs: 5,
                ..TrainConfig::default()
            },
            epsilon_grid: (1..=9).map(|k| f64::from(k) / 10.0).collect(),
            normalize: NormalizeOptions::default(),
        }
    }
}

impl ExperimentConfig {
    /// The same configuration with every seed replaced by `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.synthetic.seed = seed;
        c.annotator.seed = seed;
        c.annotator_training.seed = seed;
        c.matcher.seed = seed;
        c.baseline.seed = seed;
        c.fine_tune.seed = seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if let Err(e) = self.synthetic.validate() {
            bad.push(e.to_string());
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            bad.push(format!("validation_fraction {} must lie in (0, 1)", self.validation_fraction));
        }
        if self.train_size < 4 || self.test_size < 1 {
            bad.push("train_size must be >= 4 and test_size >= 1".to_string());
        }
        if self.n < 2 {
            bad.push(format!("n {} must be >= 2", self.n));
        }
        if self.epsilon_grid.iter().any(|&e| !(e > 0.0 && e < 1.0)) {
            bad.push("epsilon_grid values must lie in (0, 1)".to_string());
        }
        for (name, r) in [
            ("annotator_training", self.annotator_training.validate()),
            ("matcher", self.matcher.validate()),
        ] {
            if let Err(e) = r {
                bad.push(format!("{name}: {e}"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// Everything shared by the runs of one seed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub vocab: Vocabulary,
    pub oracle: RelevanceOracle,
    /// Exchanges the matcher and annotator learn from.
    pub train: Vec<Exchange>,
    /// Held-out training exchanges for model selection.
    pub validation: Vec<Exchange>,
    pub test: Vec<Exchange>,
    /// Responses of `train` and `validation`.
    pub index: InvertedIndex,
    /// Human response plus retrieved candidates, for matcher validation.
    pub validation_sets: Vec<CandidateSet>,
    /// Oracle-labelled test records.
    pub test_sets: Vec<LabeledSet>,
}

/// Candidates per test record: the human response and nine retrieved ones.
pub const TEST_CANDIDATES: usize = 10;

/// Seed for the retrieved validation sets derived from the run seed.
pub fn validation_seed(seed: u64) -> u64 {
    seed ^ 0x5eed
}

/// Splits off the last `fraction` of `exchanges` (at least one) for validation.
pub fn split_validation(exchanges: &[Exchange], fraction: f64) -> Result<(Vec<Exchange>, Vec<Exchange>)> {
    if exchanges.len() < 2 {
        return Err(Error::Contract("need at least two exchanges to hold out validation".into()));
    }
    let n_val = ((exchanges.len() as f64) * fraction).round().clamp(1.0, (exchanges.len() - 1) as f64) as usize;
    let split = exchanges.len() - n_val;
    Ok((exchanges[..split].to_vec(), exchanges[split..].to_vec()))
}

/// Seed for the random-negative sets of the `ws_rand` control.
pub fn random_negative_seed(seed: u64) -> u64 {
    seed ^ 0xabc
}

/// Input/response pairs the annotator learns from; empty sides are dropped.
pub fn annotator_pairs(train: &[Exchange]) -> Vec<(Utterance, Utterance)> {
    train
        .iter()
        .map(|e| (e.input(), e.response.clone()))
        .filter(|(x, y)| !x.is_empty() && !y.is_empty())
        .collect()
}

/// Annotated and normalized candidate sets for weak supervision: retrieved
/// candidates (`D`), or random negatives when `random` is set.
pub fn build_weak_sets(
    train: &[Exchange],
    index: &InvertedIndex,
    scorer: &dyn WeakScorer,
    n: usize,
    random: bool,
    seed: u64,
    normalize: NormalizeOptions,
) -> Result<Vec<CandidateSet>> {
    let sets = if random {
        sample_random_negatives(train, n, random_negative_seed(seed))?
    } else {
        construct_training_set(train, index, n, seed)?
    };
    normalize_all(&annotate(scorer, &sets)?, normalize)
}

impl Prepared {
    /// Generates the synthetic corpus and splits it into train and test.
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (raw, oracle) = generate_synthetic(&config.synthetic)?;
        if raw.len() < config.train_size + config.test_size {
            return Err(Error::Config(format!(
                "synthetic corpus has {} exchanges, need {}",
                raw.len(),
                config.train_size + config.test_size
            )));
        }
        let (train_raw, rest) = raw.split_at(config.train_size);
        Self::from_raw(config, train_raw, &rest[..config.test_size], oracle)
    }

    /// Prepares a run from an explicit train/test split.
    pub fn from_raw(
        config: &ExperimentConfig,
        train_raw: &[RawExchange],
        test_raw: &[RawExchange],
        oracle: RelevanceOracle,
    ) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::build(train_raw, config.vocab_max)?;
        let all_train = vocab.encode_corpus(train_raw);
        let test = vocab.encode_corpus(test_raw);
        let index = InvertedIndex::build(&all_train)?;
        let (train, validation) = split_validation(&all_train, config.validation_fraction)?;
        let seed = config.synthetic.seed;
        let validation_sets = construct_training_set(&validation, &index, config.n, validation_seed(seed))?;
        let test_sets = build_test_records(&test, &index, &oracle, &vocab, TEST_CANDIDATES, seed)?;
        Ok(Self {
            config: config.clone(),
            vocab,
            oracle,
            train,
            validation,
            test,
            index,
            validation_sets,
            test_sets,
        })
    }

    pub fn annotator_pairs(&self) -> Vec<(Utterance, Utterance)> {
        annotator_pairs(&self.train)
    }

    pub fn train_annotator(&self) -> Result<(AnnotatorModel, AnnotatorReport)> {
        train_annotator(
            &self.annotator_pairs(),
            self.vocab.len(),
            &self.config.annotator,
            &self.config.annotator_training,
        )
    }

    /// Cross-entropy baseline on random negatives.
    pub fn baseline(&self) -> Result<(MatcherModel, TrainReport)> {
        let c = &self.config;
        let data = sample_random_negatives(&self.train, c.n, c.baseline.seed)?;
        let model = MatcherModel::new(c.matcher.clone(), self.vocab.len())?;
        let config = TrainConfig {
            objective: Objective::BceRandom,
            n: c.n,
            ..c.baseline.clone()
        };
        train(model, &data, &config, &self.validation_sets)
    }

    /// Candidate sets with annotator scores and normalized margins: retrieved
    /// candidates (`D`) or, with `random`, random negatives.
    pub fn weak_sets(&self, annotator: &AnnotatorModel, n: usize, random: bool) -> Result<Vec<CandidateSet>> {
        build_weak_sets(
            &self.train,
            &self.index,
            annotator,
            n,
            random,
            self.config.fine_tune.seed,
            self.config.normalize,
        )
    }

    pub fn fine_tune(
        &self,
        base: &MatcherModel,
        sets: &[CandidateSet],
        objective: Objective,
        epsilon: Option<f64>,
    ) -> Result<(MatcherModel, TrainReport)> {
        let config = TrainConfig {
            objective,
            epsilon,
            n: sets.first().map_or(self.config.n, CandidateSet::n),
            ..self.config.fine_tune.clone()
        };
        train(base.clone(), sets, &config, &self.validation_sets)
    }

    pub fn test_metrics(&self, model: &MatcherModel) -> Result<Metrics> {
        Ok(evaluate(model, &self.test_sets, &self.index, EvalOptions::default())?.metrics)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: String,
    pub epsilon: Option<f64>,
    pub val_p_at_1: f64,
    pub test: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstRun {
    pub epsilon: f64,
    pub val_p_at_1: f64,
    pub test: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub seed: u64,
    /// Baseline, +WSrand, +const (validation-selected epsilon), +WS.
    pub rows: Vec<AblationRow>,
    /// Every epsilon of the grid, for inspection.
    pub const_grid: Vec<ConstRun>,
}

fn best_val(report: &TrainReport) -> f64 {
    report
        .epochs
        .get(report.best_epoch.wrapping_sub(1))
        .map_or(0.0, |e| e.val_p_at_1)
}

/// Runs the four ablation rows for one prepared seed.
pub fn run_ablation(p: &Prepared, annotator: &AnnotatorModel, base: &(MatcherModel, TrainReport)) -> Result<Ablation> {
    let (base_model, base_report) = base;
    let mut rows = vec![AblationRow {
        method: "baseline".into(),
        epsilon: None,
        val_p_at_1: best_val(base_report),
        test: p.test_metrics(base_model)?,
    }];

    let random_sets = p.weak_sets(annotator, p.config.n, true)?;
    let (m, r) = p.fine_tune(base_model, &random_sets, Objective::WsRand, None)?;
    rows.push(AblationRow {
        method: "+WSrand".into(),
        epsilon: None,
        val_p_at_1: best_val(&r),
        test: p.test_metrics(&m)?,
    });

    let weak_sets = p.weak_sets(annotator, p.config.n, false)?;
    let mut const_grid = Vec::new();
    for &eps in &p.config.epsilon_grid {
        let (m, r) = p.fine_tune(base_model, &weak_sets, Objective::WsConst, Some(eps))?;
        const_grid.push(ConstRun {
            epsilon: eps,
            val_p_at_1: best_val(&r),
            test: p.test_metrics(&m)?,
        });
        info!("ws_const eps {eps}: val {:.4}", best_val(&r));
    }
    // earliest epsilon wins validation ties
    let chosen = const_grid
        .iter()
        .fold(None::<&ConstRun>, |best, c| match best {
            Some(b) if b.val_p_at_1 >= c.val_p_at_1 => Some(b),
            _ => Some(c),
        })
        .ok_or_else(|| Error::Config("epsilon_grid is empty".into()))?;
    rows.push(AblationRow {
        method: "+const".into(),
        epsilon: Some(chosen.epsilon),
        val_p_at_1: chosen.val_p_at_1,
        test: chosen.test,
    });

    let (m, r) = p.fine_tune(base_model, &weak_sets, Objective::Ws, None)?;
    rows.push(AblationRow {
        method: "+WS".into(),
        epsilon: None,
        val_p_at_1: best_val(&r),
        test: p.test_metrics(&m)?,
    });
    Ok(Ablation {
        seed: p.config.synthetic.seed,
        rows,
        const_grid,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub val_p_at_1: f64,
    pub test: Metrics,
}

/// Weakly supervised fine-tuning from one shared baseline, once per
/// candidate count `n` of the retrieved training sets.
pub fn candidate_count_sweep(
    p: &Prepared,
    annotator: &AnnotatorModel,
    base: &MatcherModel,
    n_values: &[usize],
) -> Result<Vec<SweepRow>> {
    if n_values.is_empty() {
        return Err(Error::Empty("candidate counts"));
    }
    if let Some(&bad) = n_values.iter().find(|&&n| n < 2 || n > p.index.doc_count()) {
        return Err(Error::Config(format!(
            "candidate count {bad} outside 2..={}",
            p.index.doc_count()
        )));
    }
    n_values
        .iter()
        .map(|&n| {
            let sets = p.weak_sets(annotator, n, false)?;
            let (m, r) = p.fine_tune(base, &sets, Objective::Ws, None)?;
            Ok(SweepRow {
                n,
                val_p_at_1: best_val(&r),
                test: p.test_metrics(&m)?,
            })
        })
        .collect()
}
