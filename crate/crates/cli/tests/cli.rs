//! The `wsmatch` binary: stage composition, determinism and error reporting.

use std::path::Path;
use std::process::{Command, Output};

use wsmatch::annotator::NormalizeOptions;
use wsmatch::experiment::{build_weak_sets, ExperimentConfig, Prepared};
use wsmatch::index::read_candidate_sets;
use wsmatch::matchers::MatcherModel;

const CONFIG: &str = r#"
seed = 5
[experiment]
train_size = 120
test_size = 20
epsilon_grid = [0.3]
[experiment.synthetic]
exchanges_per_topic = 50
[experiment.annotator_training]
max_epochs = 2
[experiment.baseline]
max_epochs = 2
[experiment.fine_tune]
max_epochs = 1
"#;

/// The library configuration `CONFIG` describes.
fn library_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.train_size = 120;
    c.test_size = 20;
    c.epsilon_grid = vec![0.3];
    c.synthetic.exchanges_per_topic = 50;
    c.annotator_training.max_epochs = 2;
    c.baseline.max_epochs = 2;
    c.fine_tune.max_epochs = 1;
    c.with_seed(5)
}

fn wsmatch(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wsmatch"))
        .arg("--config")
        .arg(dir.join("run.toml"))
        .arg("--out")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = wsmatch(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn workdir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    dir
}

fn prepare_stages(dir: &Path) {
    for stage in ["gen-synth", "ingest", "build-index", "train-annotator"] {
        ok(dir, &[stage]);
    }
}

#[test]
fn stages_compose_to_the_library_pipeline() {
    let dir = workdir();
    let d = dir.path();
    prepare_stages(d);
    ok(d, &["annotate"]);
    ok(d, &["train"]);

    let p = Prepared::new(&library_config()).unwrap();
    let (annotator, _) = p.train_annotator().unwrap();
    let (base, _) = p.baseline().unwrap();
    assert_eq!(MatcherModel::load(&d.join("model_bce_random.bin")).unwrap(), base);
    let cfg = &p.config;
    let expected = build_weak_sets(&p.train, &p.index, &annotator, cfg.n, false, 5, NormalizeOptions::default()).unwrap();
    let from_cli = read_candidate_sets(&d.join("candidates.jsonl"), &p.vocab).unwrap();
    assert_eq!(from_cli.len(), expected.len());
    for (a, b) in from_cli.iter().zip(&expected) {
        let weak = |s: &wsmatch::index::CandidateSet| -> Vec<(Option<f64>, Option<f64>)> {
            s.candidates.iter().map(|c| (c.weak_score, c.normalized)).collect()
        };
        assert_eq!(weak(a), weak(b));
    }

    let init = d.join("model_bce_random.bin");
    ok(d, &["train", "--objective", "ws", "--init", init.to_str().unwrap()]);
    let (tuned, _) = p.fine_tune(&base, &expected, wsmatch::training::Objective::Ws, None).unwrap();
    assert_eq!(MatcherModel::load(&d.join("model_ws.bin")).unwrap(), tuned);

    let table = ok(d, &["evaluate", "--objective", "ws"]);
    assert!(table.contains("P@1"));
    let metrics: wsmatch::eval::Metrics =
        serde_json::from_str(&std::fs::read_to_string(d.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics, p.test_metrics(&tuned).unwrap());
    assert!(d.join("evaluate.config.toml").exists());
}

#[test]
fn weak_objectives_need_an_initial_model() {
    let dir = workdir();
    let d = dir.path();
    prepare_stages(d);
    ok(d, &["annotate"]);
    let out = wsmatch(d, &["train", "--objective", "ws"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--init"));
}

#[test]
fn ablation_reports_four_rows_and_repeats_exactly() {
    let first = workdir();
    let second = workdir();
    let table = ok(first.path(), &["ablate"]);
    ok(second.path(), &["ablate"]);
    for method in ["baseline", "+WSrand", "+const", "+WS"] {
        assert!(table.contains(method), "{table}");
    }
    let read = |d: &Path| std::fs::read(d.join("ablation.json")).unwrap();
    assert_eq!(read(first.path()), read(second.path()));
    let json: serde_json::Value = serde_json::from_slice(&read(first.path())).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 4);
}

#[test]
fn missing_inputs_name_the_path() {
    let dir = workdir();
    let out = wsmatch(dir.path(), &["ingest", "--corpus", "no/such/corpus.jsonl"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no/such/corpus.jsonl"));
}

#[test]
fn unknown_config_keys_are_all_listed() {
    let dir = workdir();
    std::fs::write(dir.path().join("run.toml"), "seeds = 1\n[experiment.matcher]\nwidth = 3\n").unwrap();
    let out = wsmatch(dir.path(), &["gen-synth"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("seeds") && err.contains("experiment.matcher.width"), "{err}");
}

#[test]
fn invalid_flag_values_are_rejected() {
    let dir = workdir();
    for args in [&["--objective", "hinge", "train"][..], &["--arch", "mlp", "train"][..]] {
        let out = wsmatch(dir.path(), args);
        assert!(!out.status.success(), "{args:?}");
    }
}
