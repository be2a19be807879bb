//! `wsmatch`: corpus generation, indexing, annotator training, weak
//! annotation, matcher training, evaluation and the two experiment drivers.
//!
//! Every subcommand reads its inputs from explicit flags, then `[paths]` in
//! the config file, then default file names inside the output directory, so a
//! full pipeline can run with nothing but `--out`.

mod config;
mod table;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use serde::Serialize;
use thiserror::Error;

use wsmatch::annotator::{train_annotator, AnnotatorModel};
use wsmatch::corpus::{generate_synthetic, load_corpus, write_corpus, Exchange, RelevanceOracle, Vocabulary};
use wsmatch::eval::{
    build_test_records, evaluate, read_labeled_sets, write_labeled_sets, EvalOptions, FusionConfig, LabeledSet,
};
use wsmatch::experiment::{
    annotator_pairs, build_weak_sets, candidate_count_sweep, run_ablation, split_validation, validation_seed,
    Prepared, TEST_CANDIDATES,
};
use wsmatch::index::{construct_training_set, read_candidate_sets, write_candidate_sets, CandidateSet, InvertedIndex};
use wsmatch::matchers::{Architecture, MatcherModel};
use wsmatch::training::{sample_random_negatives, train, Objective, TrainConfig};

use crate::config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] wsmatch::Error),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{0}")]
    Usage(String),
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "wsmatch", version, about = "Response-selection matchers trained with weak supervision")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed applied to every random component.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Training objective: bce_random, ws, ws_const or ws_rand.
    #[arg(long, global = true)]
    objective: Option<Objective>,
    /// Candidates per training input.
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Matcher architecture: dual_rnn or cnn.
    #[arg(long, global = true)]
    arch: Option<Architecture>,
    /// Output directory (default `wsmatch-out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Keep normalized margins above 1 instead of clipping them.
    #[arg(long, global = true)]
    no_margin_cap: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus: train.jsonl, test.jsonl and oracle.json.
    GenSynth,
    /// Build the vocabulary of a training corpus.
    Ingest {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Build the TF-IDF index over the training responses.
    BuildIndex {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Train the sequence-to-sequence annotator.
    TrainAnnotator {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Build candidate sets and attach annotator scores and margins.
    Annotate {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        annotator: Option<PathBuf>,
        /// Random negatives instead of retrieved candidates.
        #[arg(long)]
        random: bool,
    },
    /// Train a matcher.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        /// Annotated candidate sets (weakly supervised objectives).
        #[arg(long)]
        candidates: Option<PathBuf>,
        /// Pretrained bce_random model to fine-tune.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Constant margin for ws_const.
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Score labeled test records and report P@1, MAP and MRR.
    Evaluate {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        /// Labeled records in JSONL; built from --test and --oracle when absent.
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        oracle: Option<PathBuf>,
        /// Fuse matcher and TF-IDF scores with weights learned on held-out training data.
        #[arg(long)]
        fuse: bool,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Baseline, +WSrand, +const and +WS on one seed.
    Ablate {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        oracle: Option<PathBuf>,
    },
    /// Weakly supervised fine-tuning for several candidate counts.
    SweepN {
        #[arg(long, value_delimiter = ',', default_value = "2,5,10")]
        n_values: Vec<usize>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        oracle: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenSynth => "gen-synth",
            Command::Ingest { .. } => "ingest",
            Command::BuildIndex { .. } => "build-index",
            Command::TrainAnnotator { .. } => "train-annotator",
            Command::Annotate { .. } => "annotate",
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::Ablate { .. } => "ablate",
            Command::SweepN { .. } => "sweep-n",
        }
    }
}

/// Resolved settings shared by all subcommands.
struct Ctx {
    run: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn new(cli: &Cli) -> CliResult<Self> {
        let mut run = match &cli.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = cli.seed {
            run.seed = seed;
        }
        if cli.objective.is_some() {
            run.objective = cli.objective;
        }
        if let Some(out) = &cli.out {
            run.paths.out = Some(out.clone());
        }
        let e = &mut run.experiment;
        if let Some(n) = cli.n {
            e.n = n;
        }
        if let Some(arch) = cli.arch {
            e.matcher.arch = arch;
        }
        if cli.no_margin_cap {
            e.normalize.cap = None;
        }
        run.experiment = run.experiment.with_seed(run.seed);
        run.experiment.validate()?;
        let out = run.paths.out.clone().unwrap_or_else(|| PathBuf::from("wsmatch-out"));
        fs::create_dir_all(&out).map_err(|e| wsmatch::Error::io(&out, e))?;
        Ok(Self { run, out })
    }

    /// Flag, then config path, then `default` inside the output directory.
    fn input(&self, flag: &Option<PathBuf>, configured: &Option<PathBuf>, default: &str) -> PathBuf {
        flag.clone()
            .or_else(|| configured.clone())
            .unwrap_or_else(|| self.out.join(default))
    }

    fn output(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_text(&self, name: &str, text: &str) -> CliResult<PathBuf> {
        let path = self.output(name);
        fs::write(&path, text).map_err(|e| wsmatch::Error::io(&path, e))?;
        Ok(path)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
        text.push('\n');
        self.write_text(name, &text)
    }

    fn write_resolved(&self, command: &str) -> CliResult<()> {
        self.write_text(&format!("{command}.config.toml"), &self.run.to_toml()?)?;
        Ok(())
    }

    fn seed(&self) -> u64 {
        self.run.seed
    }
}

/// The encoded training corpus split into matcher training and validation parts.
struct TrainSide {
    vocab: Vocabulary,
    train: Vec<Exchange>,
    validation: Vec<Exchange>,
}

fn load_train_side(ctx: &Ctx, corpus: &Option<PathBuf>, vocab: &Option<PathBuf>) -> CliResult<TrainSide> {
    let p = &ctx.run.paths;
    let vocab = Vocabulary::load(&ctx.input(vocab, &p.vocab, "vocab.json"))?;
    let raw = load_corpus(&ctx.input(corpus, &p.corpus, "train.jsonl"))?;
    let (train, validation) = split_validation(&vocab.encode_corpus(&raw), ctx.run.experiment.validation_fraction)?;
    Ok(TrainSide {
        vocab,
        train,
        validation,
    })
}

fn load_index(ctx: &Ctx, flag: &Option<PathBuf>) -> CliResult<InvertedIndex> {
    Ok(InvertedIndex::load(&ctx.input(flag, &ctx.run.paths.index, "index.json"))?)
}

fn validation_sets(ctx: &Ctx, side: &TrainSide, index: &InvertedIndex) -> CliResult<Vec<CandidateSet>> {
    Ok(construct_training_set(
        &side.validation,
        index,
        ctx.run.experiment.n,
        validation_seed(ctx.seed()),
    )?)
}

fn gen_synth(ctx: &Ctx) -> CliResult<()> {
    let e = &ctx.run.experiment;
    let (raw, oracle) = generate_synthetic(&e.synthetic)?;
    if raw.len() < e.train_size + e.test_size {
        return Err(CliError::Config(format!(
            "synthetic corpus has {} exchanges, need train_size + test_size = {}",
            raw.len(),
            e.train_size + e.test_size
        )));
    }
    let (train_raw, rest) = raw.split_at(e.train_size);
    write_corpus(&ctx.output("train.jsonl"), train_raw)?;
    write_corpus(&ctx.output("test.jsonl"), &rest[..e.test_size])?;
    oracle.save(&ctx.output("oracle.json"))?;
    println!("wrote {} train and {} test exchanges to {}", train_raw.len(), e.test_size, ctx.out.display());
    Ok(())
}

fn ingest(ctx: &Ctx, corpus: &Option<PathBuf>) -> CliResult<()> {
    let raw = load_corpus(&ctx.input(corpus, &ctx.run.paths.corpus, "train.jsonl"))?;
    let vocab = Vocabulary::build(&raw, ctx.run.experiment.vocab_max)?;
    let path = ctx.output("vocab.json");
    vocab.save(&path)?;
    println!("vocabulary of {} entries written to {}", vocab.len(), path.display());
    Ok(())
}

fn build_index(ctx: &Ctx, corpus: &Option<PathBuf>, vocab: &Option<PathBuf>) -> CliResult<()> {
    let side = load_train_side(ctx, corpus, vocab)?;
    let all: Vec<Exchange> = side.train.iter().chain(&side.validation).cloned().collect();
    let index = InvertedIndex::build(&all)?;
    let path = ctx.output("index.json");
    index.save(&path)?;
    println!("indexed {} responses into {}", index.doc_count(), path.display());
    Ok(())
}

fn train_annotator_cmd(ctx: &Ctx, corpus: &Option<PathBuf>, vocab: &Option<PathBuf>) -> CliResult<()> {
    let side = load_train_side(ctx, corpus, vocab)?;
    let e = &ctx.run.experiment;
    let (model, report) = train_annotator(
        &annotator_pairs(&side.train),
        side.vocab.len(),
        &e.annotator,
        &e.annotator_training,
    )?;
    let path = ctx.output("annotator.bin");
    model.save(&path)?;
    ctx.write_json("annotator_report.json", &report)?;
    let best = report.epochs.get(report.best_epoch.wrapping_sub(1)).map(|ep| ep.val_perplexity);
    println!(
        "annotator written to {} (best epoch {}, validation perplexity {})",
        path.display(),
        report.best_epoch,
        best.map_or("n/a".to_string(), |p| format!("{p:.3}"))
    );
    Ok(())
}

fn annotate_cmd(
    ctx: &Ctx,
    corpus: &Option<PathBuf>,
    vocab: &Option<PathBuf>,
    index: &Option<PathBuf>,
    annotator: &Option<PathBuf>,
    random: bool,
) -> CliResult<()> {
    let side = load_train_side(ctx, corpus, vocab)?;
    let index = load_index(ctx, index)?;
    let model = AnnotatorModel::load(&ctx.input(annotator, &ctx.run.paths.annotator, "annotator.bin"))?;
    let e = &ctx.run.experiment;
    let sets = build_weak_sets(&side.train, &index, &model, e.n, random, e.fine_tune.seed, e.normalize)?;
    let path = ctx.output(if random { "candidates_random.jsonl" } else { "candidates.jsonl" });
    write_candidate_sets(&path, &sets, &side.vocab)?;
    println!("{} annotated candidate sets written to {}", sets.len(), path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(
    ctx: &Ctx,
    corpus: &Option<PathBuf>,
    vocab: &Option<PathBuf>,
    index: &Option<PathBuf>,
    candidates: &Option<PathBuf>,
    init: &Option<PathBuf>,
    epsilon: Option<f64>,
) -> CliResult<()> {
    let objective = ctx.run.objective.unwrap_or(Objective::BceRandom);
    let e = &ctx.run.experiment;
    let p = &ctx.run.paths;
    let side = load_train_side(ctx, corpus, vocab)?;
    let index = load_index(ctx, index)?;
    let validation = validation_sets(ctx, &side, &index)?;

    let (model, report) = if objective.is_weak_family() {
        let init = init.clone().or_else(|| p.init.clone()).ok_or_else(|| {
            CliError::Usage(format!(
                "objective {objective} fine-tunes a pretrained matcher: pass --init with a bce_random model"
            ))
        })?;
        let base = MatcherModel::load(&init)?;
        let default_sets = if objective == Objective::WsRand {
            "candidates_random.jsonl"
        } else {
            "candidates.jsonl"
        };
        let sets = read_candidate_sets(&ctx.input(candidates, &p.candidates, default_sets), &side.vocab)?;
        let config = TrainConfig {
            objective,
            epsilon: epsilon.or(e.fine_tune.epsilon),
            n: sets.first().map_or(e.n, CandidateSet::n),
            ..e.fine_tune.clone()
        };
        train(base, &sets, &config, &validation)?
    } else {
        let data = sample_random_negatives(&side.train, e.n, e.baseline.seed)?;
        let model = MatcherModel::new(e.matcher.clone(), side.vocab.len())?;
        let config = TrainConfig {
            objective,
            n: e.n,
            ..e.baseline.clone()
        };
        train(model, &data, &config, &validation)?
    };
    let path = ctx.output(&format!("model_{objective}.bin"));
    model.save(&path)?;
    ctx.write_json(&format!("train_{objective}.json"), &report)?;
    let best = report.epochs.get(report.best_epoch.wrapping_sub(1)).map_or(0.0, |ep| ep.val_p_at_1);
    println!(
        "{objective} matcher written to {} (best epoch {}, validation P@1 {best:.4})",
        path.display(),
        report.best_epoch
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn evaluate_cmd(
    ctx: &Ctx,
    model: &Option<PathBuf>,
    vocab: &Option<PathBuf>,
    index: &Option<PathBuf>,
    records: &Option<PathBuf>,
    test: &Option<PathBuf>,
    oracle: &Option<PathBuf>,
    fuse: bool,
    corpus: &Option<PathBuf>,
) -> CliResult<()> {
    let p = &ctx.run.paths;
    let default_model = format!("model_{}.bin", ctx.run.objective.unwrap_or(Objective::BceRandom));
    let model = MatcherModel::load(&ctx.input(model, &p.model, &default_model))?;
    let vocab_path = ctx.input(vocab, &p.vocab, "vocab.json");
    let vocab = Vocabulary::load(&vocab_path)?;
    let index = load_index(ctx, index)?;
    let load_oracle = || RelevanceOracle::load(&ctx.input(oracle, &p.oracle, "oracle.json"));

    let sets = match records.clone().or_else(|| p.records.clone()) {
        Some(path) => read_labeled_sets(&path, &vocab)?,
        None => {
            let raw = load_corpus(&ctx.input(test, &p.test, "test.jsonl"))?;
            let sets = build_test_records(
                &vocab.encode_corpus(&raw),
                &index,
                &load_oracle()?,
                &vocab,
                TEST_CANDIDATES,
                ctx.seed(),
            )?;
            write_labeled_sets(&ctx.output("records.jsonl"), &sets, &vocab)?;
            sets
        }
    };

    let held_out: Vec<LabeledSet>;
    let options = if fuse {
        let side = load_train_side(ctx, corpus, &Some(vocab_path))?;
        held_out = build_test_records(
            &side.validation,
            &index,
            &load_oracle()?,
            &vocab,
            TEST_CANDIDATES,
            validation_seed(ctx.seed()),
        )?;
        EvalOptions {
            fusion: Some((
                &held_out,
                FusionConfig {
                    seed: ctx.seed(),
                    ..FusionConfig::default()
                },
            )),
        }
    } else {
        EvalOptions::default()
    };
    let report = evaluate(&model, &sets, &index, options)?;
    ctx.write_text("metrics.json", &report.metrics.to_json())?;
    if let Some(w) = &report.fusion_weights {
        ctx.write_json("fusion.json", w)?;
    }
    let m = &report.metrics;
    let text = table::render(
        &["metric", "value"],
        &[
            vec!["P@1".into(), format!("{:.4}", m.p_at_1)],
            vec!["MAP".into(), format!("{:.4}", m.map)],
            vec!["MRR".into(), format!("{:.4}", m.mrr)],
            vec!["queries".into(), m.n_queries.to_string()],
            vec!["skipped".into(), m.n_skipped.to_string()],
        ],
    );
    ctx.write_text("metrics.txt", &text)?;
    print!("{text}");
    Ok(())
}

/// Synthetic data from the config, or the given train/test/oracle files.
fn prepare(
    ctx: &Ctx,
    corpus: &Option<PathBuf>,
    test: &Option<PathBuf>,
    oracle: &Option<PathBuf>,
) -> CliResult<Prepared> {
    let p = &ctx.run.paths;
    let pick = |flag: &Option<PathBuf>, configured: &Option<PathBuf>| flag.clone().or_else(|| configured.clone());
    match (pick(corpus, &p.corpus), pick(test, &p.test), pick(oracle, &p.oracle)) {
        (None, None, None) => Ok(Prepared::new(&ctx.run.experiment)?),
        (Some(c), Some(t), Some(o)) => Ok(Prepared::from_raw(
            &ctx.run.experiment,
            &load_corpus(&c)?,
            &load_corpus(&t)?,
            RelevanceOracle::load(&o)?,
        )?),
        _ => Err(CliError::Usage(
            "give all of --corpus, --test and --oracle, or none of them for a synthetic corpus".into(),
        )),
    }
}

fn metric_cells(m: &wsmatch::eval::Metrics) -> Vec<String> {
    vec![format!("{:.4}", m.p_at_1), format!("{:.4}", m.map), format!("{:.4}", m.mrr)]
}

fn ablate(ctx: &Ctx, corpus: &Option<PathBuf>, test: &Option<PathBuf>, oracle: &Option<PathBuf>) -> CliResult<()> {
    let prepared = prepare(ctx, corpus, test, oracle)?;
    let (annotator, _) = prepared.train_annotator()?;
    info!("annotator trained");
    let base = prepared.baseline()?;
    info!("baseline trained");
    let ablation = run_ablation(&prepared, &annotator, &base)?;
    ctx.write_json("ablation.json", &ablation)?;
    let rows: Vec<Vec<String>> = ablation
        .rows
        .iter()
        .map(|r| {
            let mut cells = vec![
                r.method.clone(),
                r.epsilon.map_or("-".into(), |e| format!("{e:.1}")),
                format!("{:.4}", r.val_p_at_1),
            ];
            cells.extend(metric_cells(&r.test));
            cells
        })
        .collect();
    let text = table::render(&["method", "epsilon", "val P@1", "P@1", "MAP", "MRR"], &rows);
    ctx.write_text("ablation.txt", &text)?;
    print!("{text}");
    Ok(())
}

fn sweep(
    ctx: &Ctx,
    n_values: &[usize],
    corpus: &Option<PathBuf>,
    test: &Option<PathBuf>,
    oracle: &Option<PathBuf>,
) -> CliResult<()> {
    let prepared = prepare(ctx, corpus, test, oracle)?;
    let (annotator, _) = prepared.train_annotator()?;
    let (base, _) = prepared.baseline()?;
    let rows = candidate_count_sweep(&prepared, &annotator, &base, n_values)?;
    ctx.write_json("sweep.json", &rows)?;
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut c = vec![r.n.to_string(), format!("{:.4}", r.val_p_at_1)];
            c.extend(metric_cells(&r.test));
            c
        })
        .collect();
    let text = table::render(&["n", "val P@1", "P@1", "MAP", "MRR"], &cells);
    ctx.write_text("sweep.txt", &text)?;
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let ctx = Ctx::new(&cli)?;
    ctx.write_resolved(cli.command.name())?;
    match &cli.command {
        Command::GenSynth => gen_synth(&ctx),
        Command::Ingest { corpus } => ingest(&ctx, corpus),
        Command::BuildIndex { corpus, vocab } => build_index(&ctx, corpus, vocab),
        Command::TrainAnnotator { corpus, vocab } => train_annotator_cmd(&ctx, corpus, vocab),
        Command::Annotate {
            corpus,
            vocab,
            index,
            annotator,
            random,
        } => annotate_cmd(&ctx, corpus, vocab, index, annotator, *random),
        Command::Train {
            corpus,
            vocab,
            index,
            candidates,
            init,
            epsilon,
        } => train_cmd(&ctx, corpus, vocab, index, candidates, init, *epsilon),
        Command::Evaluate {
            model,
            vocab,
            index,
            records,
            test,
            oracle,
            fuse,
            corpus,
        } => evaluate_cmd(&ctx, model, vocab, index, records, test, oracle, *fuse, corpus),
        Command::Ablate { corpus, test, oracle } => ablate(&ctx, corpus, test, oracle),
        Command::SweepN {
            n_values,
            corpus,
            test,
            oracle,
        } => sweep(&ctx, n_values, corpus, test, oracle),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("WSM_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

