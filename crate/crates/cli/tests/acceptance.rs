//! Acceptance run. Prints one PASS/FAIL line per criterion and exits non-zero
//! when any criterion fails.
//!
//! Run alone with `cargo test -p wsmatch-cli --test acceptance`.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wsmatch::annotator::{normalized_margins, AnnotatorConfig, AnnotatorModel, NormalizeOptions};
use wsmatch::autodiff::{gradient_check, GradCheckOptions, GradCheckReport, Graph, ParameterStore, Tensor};
use wsmatch::corpus::Utterance;
use wsmatch::eval::{EvalRecord, Metrics};
use wsmatch::experiment::{
    candidate_count_sweep, random_negative_seed, run_ablation, Ablation, ExperimentConfig, Prepared, SweepRow,
};
use wsmatch::index::{construct_training_set, Candidate, CandidateSet, Source};
use wsmatch::matchers::{Architecture, MatcherConfig, MatcherModel};
use wsmatch::nn::{uniform, CellKind, PaddedBatch, RecurrentLayer};
use wsmatch::training::{bce_loss, batch_loss, sample_random_negatives, ws_loss, MarginSource, Objective};

type Check = Result<(bool, String), String>;

struct Line {
    id: u8,
    name: &'static str,
    pass: bool,
    detail: String,
    seconds: f64,
}

fn record(lines: &mut Vec<Line>, id: u8, name: &'static str, seconds: f64, limit: Option<f64>, check: Check) {
    let (mut pass, mut detail) = check.unwrap_or_else(|e| (false, format!("error: {e}")));
    if let Some(limit) = limit {
        if seconds > limit {
            pass = false;
            detail.push_str(&format!("; over the {limit:.0} s budget"));
        }
    }
    let line = Line {
        id,
        name,
        pass,
        detail,
        seconds,
    };
    println!(
        "[{}] {:>2} {}: {} ({:.1} s)",
        if line.pass { "PASS" } else { "FAIL" },
        line.id,
        line.name,
        line.detail,
        line.seconds
    );
    lines.push(line);
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1: gradients

fn set_pattern(store: &mut ParameterStore, name: &str, scale: f64) {
    if let Some(t) = store.get_mut(name) {
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = scale * (((i * 7 + 3) % 11) as f64 / 5.0 - 1.0);
        }
    }
}

fn small_matcher(arch: Architecture) -> Result<MatcherModel, String> {
    let mut m = MatcherModel::new(
        MatcherConfig {
            arch,
            embedding_size: 4,
            hidden_size: 3,
            filters: 3,
            seed: 21,
            ..MatcherConfig::default()
        },
        14,
    )
    .map_err(err)?;
    // the read-out starts at zero; give every parameter a non-trivial gradient
    for name in ["bilinear.w", "bilinear.b", "output.w", "output.b", "hidden.b", "x_conv.b", "y_conv.b"] {
        set_pattern(&mut m.params, name, 0.6);
    }
    Ok(m)
}

fn scored_set(id: &str, input: &[u32], responses: &[&[u32]], margins: &[f64]) -> CandidateSet {
    let candidates = responses
        .iter()
        .enumerate()
        .map(|(j, r)| {
            let mut c = Candidate::new(
                Utterance(r.to_vec()),
                if j == 0 { Source::Human } else { Source::Retrieved },
            );
            c.normalized = Some(if j == 0 { 0.0 } else { margins[j - 1] });
            c
        })
        .collect();
    CandidateSet {
        input_id: id.into(),
        input: Utterance(input.to_vec()),
        candidates,
    }
}

fn criterion_1() -> Check {
    let options = GradCheckOptions::default();
    let mut reports: Vec<(String, GradCheckReport)> = Vec::new();
    let xs: [&[u32]; 2] = [&[4, 5, 6], &[7, 8]];
    let ys: [&[u32]; 4] = [&[9, 10, 11], &[5], &[6, 4, 12], &[13, 4]];
    let owner = [0, 0, 1, 1];

    for arch in [Architecture::DualRnn, Architecture::Cnn] {
        let m = small_matcher(arch)?;
        let r = gradient_check(
            &m.params,
            |g| {
                let p = m.forward(g, &xs, &ys, &owner)?;
                let lp = g.log(p);
                Ok(g.reduce_sum(lp))
            },
            &options,
        )
        .map_err(err)?;
        reports.push((arch.to_string(), r));
    }

    for kind in [CellKind::Gru, CellKind::Lstm] {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParameterStore::new();
        store.insert("emb", uniform(&[14, 5], 0.5, &mut rng), true).map_err(err)?;
        let layer = RecurrentLayer::new("cell", kind, 5, 4);
        layer.init_params(&mut store, 0.5, &mut rng).map_err(err)?;
        set_pattern(&mut store, "cell.b", 0.1);
        let r = gradient_check(
            &store,
            |g| {
                let batch = PaddedBatch::new(&xs)?;
                let emb = g.param("emb")?;
                let x = g.embedding_lookup(emb, &batch.ids)?;
                let enc = layer.encode(g, x, &batch)?;
                let t = g.tanh(enc.last.h);
                let sq = g.mul(t, t)?;
                Ok(g.reduce_sum(sq))
            },
            &options,
        )
        .map_err(err)?;
        reports.push((format!("annotator {kind} cell"), r));
    }

    let mut ann = AnnotatorModel::new(
        AnnotatorConfig {
            embedding_size: 4,
            hidden_size: 3,
            init_scale: 0.4,
            seed: 13,
            ..AnnotatorConfig::default()
        },
        14,
    )
    .map_err(err)?;
    for name in ["encoder.b", "decoder.b", "output.b"] {
        set_pattern(&mut ann.params, name, 0.05);
    }
    let r = gradient_check(
        &ann.params,
        |g| {
            let ll = ann.log_likelihood(g, &xs, &[&[9, 4], &[5, 6, 7]])?;
            let total = g.reduce_sum(ll);
            Ok(g.scale(total, -0.25))
        },
        &options,
    )
    .map_err(err)?;
    reports.push(("attention decoder".into(), r));

    // Losses on a free score column, then through a matcher.
    let mut scores = ParameterStore::new();
    scores
        .insert("m", Tensor::column(vec![0.62, 0.31, 0.77, 0.45]).map_err(err)?, true)
        .map_err(err)?;
    let r = gradient_check(
        &scores,
        |g| {
            let m = g.param("m")?;
            bce_loss(g, m, &[1.0, 0.0, 0.0, 1.0])
        },
        &options,
    )
    .map_err(err)?;
    reports.push(("bce_loss".into(), r));
    let r = gradient_check(
        &scores,
        |g| {
            let m = g.param("m")?;
            // terms 0.31-0.62+0.5, 0.77-0.62+0.2, 0.45-0.62+0.1: two active, one inactive, none at the kink
            ws_loss(g, m, &[0, 0, 0], &[1, 2, 3], &[0.5, 0.2, 0.1])
        },
        &options,
    )
    .map_err(err)?;
    reports.push(("ws_loss".into(), r));

    let m = small_matcher(Architecture::DualRnn)?;
    let sets = [
        scored_set("a", &[4, 5, 6], &[&[9, 10, 11], &[5], &[6, 4, 12]], &[0.9, 0.8]),
        scored_set("b", &[7, 8], &[&[13, 4], &[9, 9], &[12]], &[0.7, 1.0]),
    ];
    let refs: Vec<&CandidateSet> = sets.iter().collect();
    for objective in [Objective::BceRandom, Objective::Ws] {
        let r = gradient_check(
            &m.params,
            |g| batch_loss(&m, g, &refs, objective, MarginSource::Weak),
            &options,
        )
        .map_err(err)?;
        reports.push((format!("dual_rnn + {objective}"), r));
    }

    let worst = reports
        .iter()
        .map(|(_, r)| r.max_relative_error)
        .fold(0.0f64, f64::max);
    let checked: usize = reports.iter().map(|(_, r)| r.coordinates_checked).sum();
    let excluded: usize = reports.iter().map(|(_, r)| r.coordinates_excluded).sum();
    let failing: Vec<String> = reports
        .iter()
        .filter(|(_, r)| !(r.max_relative_error < 1e-4) || r.coordinates_checked == 0)
        .map(|(n, r)| format!("{n} {:.2e}", r.max_relative_error))
        .collect();
    Ok((
        failing.is_empty(),
        format!(
            "{} graphs, {checked} coordinates, {excluded} at kinks, worst relative error {worst:.2e}{}",
            reports.len(),
            if failing.is_empty() {
                String::new()
            } else {
                format!(", failing: {}", failing.join(", "))
            }
        ),
    ))
}

// ---------------------------------------------------------------- 2: metrics

/// Oracle ranking: position of each item counts strictly higher scores and
/// equal scores listed earlier.
fn oracle_metrics(scores: &[f64], rel: &[bool]) -> Option<(f64, f64, f64)> {
    let total = rel.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let n = scores.len();
    let mut ranked = vec![false; n];
    for i in 0..n {
        let pos = (0..n)
            .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
            .count();
        ranked[pos] = rel[i];
    }
    let p1 = if ranked[0] { 1.0 } else { 0.0 };
    let mut hits = 0usize;
    let mut ap = 0.0;
    let mut rr = 0.0;
    for (k, &r) in ranked.iter().enumerate() {
        if r {
            hits += 1;
            ap += hits as f64 / (k + 1) as f64;
            if rr == 0.0 {
                rr = 1.0 / (k + 1) as f64;
            }
        }
    }
    Some((p1, ap / total as f64, rr))
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn criterion_2() -> Check {
    let mut worst = 0.0f64;
    let mut compared = 0usize;
    for len in 1..=6usize {
        let mut score_vectors: Vec<Vec<f64>> = permutations(len)
            .into_iter()
            .map(|p| p.into_iter().map(|v| v as f64 * 0.25 - 0.5).collect())
            .collect();
        // ties: every vector over three levels
        for code in 0..3usize.pow(len as u32) {
            score_vectors.push((0..len).map(|i| ((code / 3usize.pow(i as u32)) % 3) as f64).collect());
        }
        for mask in 0..(1usize << len) {
            let rel: Vec<bool> = (0..len).map(|i| mask >> i & 1 == 1).collect();
            let mut records = Vec::with_capacity(score_vectors.len());
            let mut sums = (0.0, 0.0, 0.0, 0usize);
            for scores in &score_vectors {
                let rec = EvalRecord::new(format!("q{}", records.len()), scores, &rel);
                let got = Metrics::compute(std::slice::from_ref(&rec));
                match oracle_metrics(scores, &rel) {
                    Some((p1, ap, rr)) => {
                        worst = worst
                            .max((got.p_at_1 - p1).abs())
                            .max((got.map - ap).abs())
                            .max((got.mrr - rr).abs());
                        sums.0 += p1;
                        sums.1 += ap;
                        sums.2 += rr;
                        sums.3 += 1;
                    }
                    None => {
                        if got.n_queries != 0 || got.n_skipped != 1 {
                            return Ok((false, format!("record without relevant candidate was scored: {rel:?}")));
                        }
                    }
                }
                compared += 1;
                records.push(rec);
            }
            let all = Metrics::compute(&records);
            if sums.3 > 0 {
                let k = sums.3 as f64;
                worst = worst
                    .max((all.p_at_1 - sums.0 / k).abs())
                    .max((all.map - sums.1 / k).abs())
                    .max((all.mrr - sums.2 / k).abs());
            }
        }
    }
    Ok((
        worst <= 1e-12,
        format!("{compared} (scores, relevance) pairs, lengths 1-6, max deviation {worst:.1e}"),
    ))
}

// ---------------------------------------------------------------- 3: weak signals

fn criterion_3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = Vec::new();
    let mut worst_scaled = 0.0f64;
    let trials = 20_000;
    for t in 0..trials {
        let n = rng.gen_range(2..=12);
        let scores: Vec<f64> = (0..n).map(|_| -rng.gen_range(0.5..80.0)).collect();
        let cap = if t % 2 == 0 { NormalizeOptions { cap: None } } else { NormalizeOptions::default() };
        let s = normalized_margins(&scores, cap).map_err(err)?;
        if s[0] != 0.0 {
            failures.push(format!("s'_1 = {}", s[0]));
        }
        if s.iter().any(|&v| !(v >= 0.0)) {
            failures.push(format!("negative margin in {s:?}"));
        }
        for j in 1..n {
            if scores[j] >= scores[0] && s[j] != 0.0 {
                failures.push(format!("s_j >= s_1 but s'_j = {}", s[j]));
            }
        }
        let pow2 = 2f64.powi(rng.gen_range(-6..=6));
        let scaled: Vec<f64> = scores.iter().map(|v| v * pow2).collect();
        if normalized_margins(&scaled, cap).map_err(err)? != s {
            failures.push(format!("scaling by {pow2} changed margins"));
        }
        let c = rng.gen_range(0.01..100.0);
        let scaled: Vec<f64> = scores.iter().map(|v| v * c).collect();
        let s2 = normalized_margins(&scaled, cap).map_err(err)?;
        for (a, b) in s.iter().zip(&s2) {
            worst_scaled = worst_scaled.max((a - b).abs());
        }
    }
    if worst_scaled > 1e-12 {
        failures.push(format!("arbitrary scaling moved a margin by {worst_scaled:.1e}"));
    }

    // constant margins versus weak margins that all equal the constant
    let m = small_matcher(Architecture::DualRnn)?;
    for eps in [0.1, 0.35, 0.9] {
        let sets = [
            scored_set("a", &[4, 5, 6], &[&[9, 10, 11], &[5], &[6, 4, 12]], &[eps, eps]),
            scored_set("b", &[7, 8], &[&[13, 4], &[9, 9], &[12]], &[eps, eps]),
        ];
        let refs: Vec<&CandidateSet> = sets.iter().collect();
        let mut g1 = Graph::with_params(&m.params);
        let l1 = batch_loss(&m, &mut g1, &refs, Objective::WsConst, MarginSource::Const(eps)).map_err(err)?;
        let mut g2 = Graph::with_params(&m.params);
        let l2 = batch_loss(&m, &mut g2, &refs, Objective::Ws, MarginSource::Weak).map_err(err)?;
        let same_grads = {
            let a = g1.backward(l1).map_err(err)?;
            let b = g2.backward(l2).map_err(err)?;
            let same = a.iter().all(|(k, v)| b.get(k) == Some(v));
            same
        };
        if g1.scalar(l1) != g2.scalar(l2) || !same_grads {
            failures.push(format!("ws_const({eps}) differs from ws with all margins {eps}"));
        }
    }
    failures.truncate(5);
    Ok((
        failures.is_empty(),
        if failures.is_empty() {
            format!(
                "{trials} score vectors: s'_1 = 0, s' >= 0, zero when s_j >= s_1, exact under power-of-two scaling, \
                 {worst_scaled:.1e} under arbitrary c > 0; constant and weak losses identical"
            )
        } else {
            failures.join("; ")
        },
    ))
}

// ---------------------------------------------------------------- 4: uniform decoder

fn criterion_4() -> Check {
    let mut worst = 0.0f64;
    let mut cases = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for vocab in [6usize, 10, 57, 300, 2000] {
        let mut model = AnnotatorModel::new(
            AnnotatorConfig {
                embedding_size: 5,
                hidden_size: 4,
                seed: 9,
                ..AnnotatorConfig::default()
            },
            vocab,
        )
        .map_err(err)?;
        model.zero_output_projection();
        for len in [1usize, 2, 3, 5, 8, 13] {
            let x: Vec<u32> = (0..3).map(|_| rng.gen_range(4..vocab as u32)).collect();
            let y: Vec<u32> = (0..len).map(|_| rng.gen_range(4..vocab as u32)).collect();
            let s = model.score(&x, &y).map_err(err)?;
            // one prediction per response token plus end-of-sequence
            let l = (len + 1) as f64;
            let expected = l * (1.0 / vocab as f64).ln();
            worst = worst.max((s - expected).abs());
            cases += 1;
        }
    }
    Ok((worst <= 1e-9, format!("{cases} (L, V) cases, max |s - L ln(1/V)| = {worst:.1e}")))
}

// ---------------------------------------------------------------- 8: CLI determinism

const SMALL_CONFIG: &str = r#"
seed = 11
[experiment]
train_size = 150
test_size = 30
epsilon_grid = [0.2, 0.6]
[experiment.synthetic]
exchanges_per_topic = 60
[experiment.annotator_training]
max_epochs = 3
[experiment.baseline]
max_epochs = 2
[experiment.fine_tune]
max_epochs = 1
"#;

fn run_cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_wsmatch"))
        .arg("--config")
        .arg(dir.join("run.toml"))
        .arg("--out")
        .arg(dir)
        .args(args)
        .output()
        .map_err(err)?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("wsmatch {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn cli_outputs(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    std::fs::write(dir.join("run.toml"), SMALL_CONFIG).map_err(err)?;
    let steps: &[&[&str]] = &[
        &["gen-synth"],
        &["ingest"],
        &["build-index"],
        &["train-annotator"],
        &["annotate"],
        &["annotate", "--random"],
        &["train"],
        &["train", "--objective", "ws", "--init", "MODEL"],
        &["train", "--objective", "ws_rand", "--init", "MODEL"],
        &["train", "--objective", "ws_const", "--epsilon", "0.4", "--init", "MODEL"],
        &["evaluate", "--objective", "ws"],
        &["ablate"],
        &["sweep-n", "--n-values", "2,5"],
    ];
    let base = dir.join("model_bce_random.bin");
    let base = base.to_str().ok_or("non-UTF-8 temp path")?;
    for step in steps {
        let args: Vec<&str> = step.iter().map(|a| if *a == "MODEL" { base } else { a }).collect();
        run_cli(dir, &args)?;
    }
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(err)? {
        let path = entry.map_err(err)?.path();
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        let keep = name.ends_with(".bin")
            || ["metrics.json", "ablation.json", "sweep.json", "candidates.jsonl", "records.jsonl"].contains(&name.as_str());
        if keep {
            files.insert(name, std::fs::read(&path).map_err(err)?);
        }
    }
    Ok(files)
}

fn criterion_8() -> Check {
    let a = tempfile::tempdir().map_err(err)?;
    let b = tempfile::tempdir().map_err(err)?;
    let first = cli_outputs(a.path())?;
    let second = cli_outputs(b.path())?;
    let differing: Vec<&String> = first.keys().filter(|k| first.get(*k) != second.get(*k)).collect();
    let pass = differing.is_empty() && first.len() == second.len() && first.len() >= 10;
    Ok((
        pass,
        if pass {
            format!("{} output files byte-identical across two full CLI runs", first.len())
        } else {
            format!("differing files: {differing:?}")
        },
    ))
}

// ---------------------------------------------------------------- 5-7, 9, 10: experiments

struct SeedRun {
    ablation: Ablation,
    sweep: Vec<SweepRow>,
    pipeline_seconds: f64,
    sweep_seconds: f64,
}

const SEEDS: [u64; 3] = [7, 17, 27];

fn row_p1(a: &Ablation, method: &str) -> f64 {
    a.rows.iter().find(|r| r.method == method).map_or(f64::NAN, |r| r.test.p_at_1)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Share of held-out inputs whose gold response outscores a random response
/// from another topic.
fn criterion_9(p: &Prepared, annotator: &AnnotatorModel) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let held_out: Vec<_> = p.test.iter().take(100).collect();
    let pool: Vec<_> = p.test.iter().chain(&p.train).collect();
    let mut wins = 0;
    for ex in &held_out {
        let other = loop {
            let cand = pool.choose(&mut rng).expect("non-empty pool");
            if cand.topic_id.is_some() && cand.topic_id != ex.topic_id {
                break cand;
            }
        };
        let x = ex.input();
        let gold = annotator.score(x.ids(), ex.response.ids()).map_err(err)?;
        let rand = annotator.score(x.ids(), other.response.ids()).map_err(err)?;
        if gold > rand {
            wins += 1;
        }
    }
    let share = wins as f64 / held_out.len() as f64;
    Ok((
        share >= 0.9 && held_out.len() == 100 && p.config.synthetic.noise_rate == 0.0,
        format!("gold beats other-topic response on {wins}/{} inputs (seed {})", held_out.len(), p.config.synthetic.seed),
    ))
}

fn mean_negative_cosine(p: &Prepared, sets: &[CandidateSet]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in sets {
        for c in &s.candidates[1..] {
            total += p.index.tfidf_cosine(&s.input, &c.response);
            count += 1;
        }
    }
    total / count as f64
}

fn criterion_10_seed(p: &Prepared) -> Result<(f64, f64), String> {
    let seed = p.config.fine_tune.seed;
    let retrieved = construct_training_set(&p.train, &p.index, p.config.n, seed).map_err(err)?;
    let random = sample_random_negatives(&p.train, p.config.n, random_negative_seed(seed)).map_err(err)?;
    Ok((mean_negative_cosine(p, &retrieved), mean_negative_cosine(p, &random)))
}

fn main() {
    let mut lines = Vec::new();
    let total = Instant::now();

    let (c, t) = timed(criterion_1);
    record(&mut lines, 1, "gradient check", t, Some(60.0), c);
    let (c, t) = timed(criterion_2);
    record(&mut lines, 2, "ranking metrics vs brute force", t, None, c);
    let (c, t) = timed(criterion_3);
    record(&mut lines, 3, "weak-signal normalization", t, None, c);
    let (c, t) = timed(criterion_4);
    record(&mut lines, 4, "uniform decoder log-likelihood", t, None, c);
    let (c, t) = timed(criterion_8);
    record(&mut lines, 8, "CLI determinism", t, None, c);

    let mut runs: Vec<SeedRun> = Vec::new();
    let mut setup_error = None;
    let mut c9: Option<(Check, f64)> = None;
    let mut c10: Vec<(u64, f64, f64)> = Vec::new();
    let mut c10_error = None;
    for seed in SEEDS {
        let start = Instant::now();
        let mut step = || -> Result<SeedRun, String> {
            let p = Prepared::new(&ExperimentConfig::default().with_seed(seed)).map_err(err)?;
            match criterion_10_seed(&p) {
                Ok((r, q)) => c10.push((seed, r, q)),
                Err(e) => c10_error = Some(e),
            }
            let ann_start = Instant::now();
            let (annotator, report) = p.train_annotator().map_err(err)?;
            let ann_seconds = ann_start.elapsed().as_secs_f64();
            println!("  seed {seed}: annotator best epoch {} ({ann_seconds:.0} s)", report.best_epoch);
            if c9.is_none() {
                let (c, t) = timed(|| criterion_9(&p, &annotator));
                c9 = Some((c, ann_seconds + t));
            }
            let base = p.baseline().map_err(err)?;
            let ablation = run_ablation(&p, &annotator, &base).map_err(err)?;
            let pipeline_seconds = start.elapsed().as_secs_f64();
            let sweep_start = Instant::now();
            // the n = 10 run is the ablation's +WS row: same sets, same schedule
            let mut sweep = candidate_count_sweep(&p, &annotator, &base.0, &[2, 5]).map_err(err)?;
            let ws = ablation.rows.iter().find(|r| r.method == "+WS").ok_or("missing +WS row")?;
            sweep.push(SweepRow {
                n: 10,
                val_p_at_1: ws.val_p_at_1,
                test: ws.test,
            });
            let sweep_seconds = sweep_start.elapsed().as_secs_f64();
            for r in &ablation.rows {
                println!(
                    "  seed {seed}: {:<9} eps {:<4} val {:.4} test P@1 {:.4}",
                    r.method,
                    r.epsilon.map_or("-".into(), |e| e.to_string()),
                    r.val_p_at_1,
                    r.test.p_at_1
                );
            }
            Ok(SeedRun {
                ablation,
                sweep,
                pipeline_seconds,
                sweep_seconds,
            })
        };
        match step() {
            Ok(run) => runs.push(run),
            Err(e) => {
                setup_error = Some(format!("seed {seed}: {e}"));
                break;
            }
        }
    }

    let pipeline: f64 = runs.iter().map(|r| r.pipeline_seconds).sum();
    let sweep_extra: f64 = runs.iter().map(|r| r.sweep_seconds).sum();
    let complete = setup_error.is_none() && runs.len() == SEEDS.len();
    let failed = |e: &Option<String>| Err(e.clone().unwrap_or_else(|| "experiment did not run".into()));

    let c5: Check = if complete {
        let ws = mean(runs.iter().map(|r| row_p1(&r.ablation, "+WS")));
        let bce = mean(runs.iter().map(|r| row_p1(&r.ablation, "baseline")));
        Ok((ws >= bce + 0.02, format!("mean test P@1 ws {ws:.4} vs bce_random {bce:.4} (need +0.02)")))
    } else {
        failed(&setup_error)
    };
    record(&mut lines, 5, "weak supervision beats the baseline", pipeline, Some(900.0), c5);

    let c6: Check = if complete {
        let ws = mean(runs.iter().map(|r| row_p1(&r.ablation, "+WS")));
        let ws_rand = mean(runs.iter().map(|r| row_p1(&r.ablation, "+WSrand")));
        let grid = &runs[0].ablation.const_grid;
        let (best_eps, best_const) = (0..grid.len())
            .map(|i| (grid[i].epsilon, mean(runs.iter().map(|r| r.ablation.const_grid[i].test.p_at_1))))
            .fold((f64::NAN, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
        Ok((
            ws >= ws_rand + 0.01 && ws >= best_const - 0.005,
            format!(
                "ws {ws:.4}, ws_rand {ws_rand:.4} (need +0.01), best ws_const {best_const:.4} at eps {best_eps} (need -0.005)"
            ),
        ))
    } else {
        failed(&setup_error)
    };
    record(&mut lines, 6, "ablation ordering", pipeline, Some(1800.0), c6);

    let c7: Check = if complete {
        let at = |n: usize| mean(runs.iter().map(|r| r.sweep.iter().find(|s| s.n == n).map_or(f64::NAN, |s| s.test.p_at_1)));
        let (p2, p5, p10) = (at(2), at(5), at(10));
        Ok((p10 >= p2 - 0.01, format!("mean test P@1 n=2 {p2:.4}, n=5 {p5:.4}, n=10 {p10:.4}")))
    } else {
        failed(&setup_error)
    };
    record(&mut lines, 7, "candidate-count sweep", pipeline + sweep_extra, None, c7);

    let (c9, t9) = c9.unwrap_or_else(|| (failed(&setup_error), 0.0));
    record(&mut lines, 9, "annotator prefers gold responses", t9, Some(300.0), c9);

    let c10: Check = match (&c10_error, c10.len() == SEEDS.len()) {
        (None, true) => Ok((
            c10.iter().all(|(_, r, q)| r > q),
            c10.iter()
                .map(|(s, r, q)| format!("seed {s}: retrieved {r:.4} vs random {q:.4}"))
                .collect::<Vec<_>>()
                .join(", "),
        )),
        (Some(e), _) => Err(e.clone()),
        _ => failed(&setup_error),
    };
    record(&mut lines, 10, "retrieved negatives are lexically closer", 0.0, None, c10);

    lines.sort_by_key(|l| l.id);
    let passed = lines.iter().filter(|l| l.pass).count();
    println!("\nsummary ({:.0} s total):", total.elapsed().as_secs_f64());
    for l in &lines {
        println!("  {:>2} {}", l.id, if l.pass { "PASS" } else { "FAIL" });
    }
    println!("{passed}/{} criteria passed", lines.len());
    if passed != lines.len() {
        std::process::exit(1);
    }
}
