use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use trajcal::calibrator::load_model;
use trajcal::metrics::{evaluate, PredictionSet};
use trajcal::pipeline::PUBLISHED_GRID;
use trajcal::table::FeatureTable;
use trajcal::EvalReport;

const GEN: &str = r#"
n_trajectories = 300
steps_range = [1, 10]
tokens_range = [10, 40]
noise = 0.05
leak = 0.8
seed = 3

[reliability]
kind = "uniform"
lo = 0.5
hi = 1.0
"#;

fn trajcal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trajcal"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = trajcal(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{}{suffix}", path.display()))
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, text: &str) -> PathBuf {
        let path = self.path(name);
        std::fs::write(&path, text).unwrap();
        path
    }

    /// Synthetic traces plus their full feature table.
    fn corpus(&self, gen: &str, stem: &str) -> (PathBuf, PathBuf) {
        let cfg = self.write(&format!("{stem}.toml"), gen);
        let traces = self.path(&format!("{stem}.jsonl"));
        let table = self.path(&format!("{stem}.csv"));
        ok(&["synth", "--input", p(&cfg), "--output", p(&traces)]);
        ok(&["extract", "--input", p(&traces), "--output", p(&table)]);
        (traces, table)
    }
}

const THREE: &str = r#"{"format":"trajcal-trace","version":1,"k":3}
{"id":"a","label":1,"steps":[[{"top1":0.9,"topk":[0.9,0.05]},{"top1":0.8,"topk":[0.8]}],[{"top1":0.7,"topk":[0.7,0.2,0.1]}]]}
{"id":"b","label":0,"steps":[[{"top1":0.4,"topk":[0.4,0.3]}]]}
{"id":"c","steps":[[{"top1_lp":-0.1,"topk_lp":[-0.1,-2.5]}],[{"top1":0.6,"topk":[0.6]}]],"meta":{"response":"It is 4. Confidence: 85%"}}
"#;

#[test]
fn extract_writes_one_row_per_record_and_times_itself() {
    let fx = Fixture::new();
    let input = fx.write("three.jsonl", THREE);
    let out = fx.path("three.csv");
    ok(&["extract", "--input", p(&input), "--output", p(&out)]);
    let table = FeatureTable::read(&out).unwrap();
    assert_eq!(table.len(), 3);
    assert_eq!(table.feature_names.len(), 48);
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 4);
    assert_eq!(table.labels, vec![Some(true), Some(false), None]);

    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(with_suffix(&out, ".manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "extract");
    assert!(manifest["timings_ms"]["extract_per_trajectory"].as_f64().unwrap() > 0.0);

    let narrow = fx.path("structure.csv");
    ok(&["extract", "--input", p(&input), "--output", p(&narrow), "--categories", "structure"]);
    let t = FeatureTable::read(&narrow).unwrap();
    assert_eq!(
        t.feature_names,
        vec!["normalized_step_count", "first_token_count", "last_token_count", "avg_tokens_per_step", "std_tokens_per_step"]
    );
    assert_eq!(t.rows[[0, 0]], 0.2);
}

#[test]
fn extract_prefix_and_k_flags() {
    let fx = Fixture::new();
    let input = fx.write("three.jsonl", THREE);
    let full = fx.path("full.csv");
    let first = fx.path("first.csv");
    let k1 = fx.path("k1.csv");
    ok(&["extract", "--input", p(&input), "--output", p(&full)]);
    ok(&["extract", "--input", p(&input), "--output", p(&first), "--prefix", "1"]);
    ok(&["extract", "--input", p(&input), "--output", p(&k1), "--k", "1"]);
    let (full, first, k1) = (
        FeatureTable::read(&full).unwrap(),
        FeatureTable::read(&first).unwrap(),
        FeatureTable::read(&k1).unwrap(),
    );
    let col = |t: &FeatureTable, name: &str| {
        let j = t.feature_names.iter().position(|n| n == name).unwrap();
        t.rows.column(j).to_vec()
    };
    assert_eq!(col(&first, "normalized_step_count"), vec![0.1, 0.1, 0.1]);
    assert_eq!(col(&full, "normalized_step_count"), vec![0.2, 0.1, 0.2]);
    // with k = 1 the top-k average collapses onto the top-1 average
    assert_eq!(col(&k1, "first_topk_avg"), col(&k1, "first_top1_avg"));
    assert_ne!(col(&full, "first_topk_avg"), col(&full, "first_top1_avg"));
}

#[test]
fn parse_errors_name_the_line_and_leave_nothing_behind() {
    let fx = Fixture::new();
    let bad = THREE.replace(r#"{"top1":0.4,"topk":[0.4,0.3]}"#, r#"{"top1":1.5,"topk":[1.5]}"#);
    let input = fx.write("bad.jsonl", &bad);
    let out = fx.path("bad.csv");
    let run = trajcal(&["extract", "--input", p(&input), "--output", p(&out)]);
    assert_eq!(run.status.code(), Some(11));
    let msg = String::from_utf8_lossy(&run.stderr);
    assert!(msg.contains("line 3"), "{msg}");
    assert!(msg.contains("steps[0][0]"), "{msg}");
    assert!(!out.exists());
    assert!(!with_suffix(&out, ".manifest.json").exists());
    assert_eq!(std::fs::read_dir(fx.dir.path()).unwrap().count(), 1);
}

#[test]
fn exit_codes_are_command_specific() {
    let fx = Fixture::new();
    let input = fx.write("three.jsonl", THREE);
    let table = fx.path("three.csv");
    ok(&["extract", "--input", p(&input), "--output", p(&table)]);
    // unlabelled row
    let run = trajcal(&["train", "--input", p(&table), "--output", p(&fx.path("m.txt"))]);
    assert_eq!(run.status.code(), Some(22));
    // missing file
    let run = trajcal(&["train", "--input", p(&fx.path("nope.csv")), "--output", p(&fx.path("m.txt"))]);
    assert_eq!(run.status.code(), Some(24));
    // corrupt model
    let model = fx.write("model.txt", "trajcal-model v1\npenalty l3\n");
    let run = trajcal(&["eval", "--model", p(&model), "--input", p(&table), "--output", p(&fx.path("r.json"))]);
    assert_eq!(run.status.code(), Some(33));
    let run = trajcal(&["transfer", "--model", p(&model), "--input", p(&table), "--output", p(&fx.path("r.json"))]);
    assert_eq!(run.status.code(), Some(43));
    // bad generator config
    let cfg = fx.write("g.toml", "n_trajectories = 3\n");
    let run = trajcal(&["synth", "--input", p(&cfg), "--output", p(&fx.path("s.jsonl"))]);
    assert_eq!(run.status.code(), Some(72));
    // usage error
    assert_eq!(trajcal(&["train", "--penalty", "l3"]).status.code(), Some(2));
    let run = Command::new(env!("CARGO_BIN_EXE_trajcal"))
        .args(["extract", "--input", p(&input), "--output", p(&fx.path("x.csv"))])
        .env("TRAJCAL_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(run.status.code(), Some(2));
}

#[test]
fn train_is_byte_reproducible_and_picks_a_published_alpha() {
    let fx = Fixture::new();
    let (traces, table) = fx.corpus(GEN, "syn");
    let before = (std::fs::read(&traces).unwrap(), std::fs::read(&table).unwrap());
    let (m1, m2) = (fx.path("m1.txt"), fx.path("m2.txt"));
    ok(&["train", "--input", p(&table), "--output", p(&m1)]);
    ok(&["train", "--input", p(&table), "--output", p(&m2), "--seed", "42"]);
    assert_eq!(std::fs::read(&m1).unwrap(), std::fs::read(&m2).unwrap());
    let (r1, r2) = (
        std::fs::read(with_suffix(&m1, ".cv.json")).unwrap(),
        std::fs::read(with_suffix(&m2, ".cv.json")).unwrap(),
    );
    assert_eq!(r1, r2);
    let report: serde_json::Value = serde_json::from_slice(&r1).unwrap();
    let alpha = report["chosen_alpha"].as_f64().unwrap();
    assert!(PUBLISHED_GRID.contains(&alpha));
    assert_eq!(report["grid"].as_array().unwrap().len(), 15);
    assert_eq!(report["fold_results"].as_array().unwrap().len(), 5);
    // inputs untouched
    assert_eq!(before, (std::fs::read(&traces).unwrap(), std::fs::read(&table).unwrap()));

    // a single alpha bypasses the grid
    let m3 = fx.path("m3.txt");
    ok(&["train", "--input", p(&table), "--output", p(&m3), "--alpha", "0.01", "--penalty", "l2"]);
    let m = load_model(&std::fs::read(&m3).unwrap()).unwrap();
    assert_eq!((m.alpha, m.penalty.to_string().as_str()), (0.01, "l2"));
}

#[test]
fn eval_on_training_table_reproduces_in_sample_metrics() {
    let fx = Fixture::new();
    let (_, table) = fx.corpus(GEN, "syn");
    let model = fx.path("m.txt");
    let report = fx.path("r.json");
    ok(&["train", "--input", p(&table), "--output", p(&model), "--grid", "0.01,0.1"]);
    ok(&["eval", "--model", p(&model), "--input", p(&table), "--output", p(&report)]);

    let m = load_model(&std::fs::read(&model).unwrap()).unwrap();
    let d = FeatureTable::read(&table).unwrap().into_dataset("syn").unwrap();
    let direct = evaluate(
        &PredictionSet::new(m.predict_rows(d.features.view()).unwrap(), d.labels.clone()).unwrap(),
        10,
    )
    .unwrap();
    let text = std::fs::read_to_string(&report).unwrap();
    assert_eq!(text, direct.to_json() + "\n");
    let bins = std::fs::read_to_string(with_suffix(&report, ".bins.csv")).unwrap();
    assert_eq!(bins, direct.reliability().to_csv());
    let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed["n"], 300);
}

#[test]
fn gac_and_transfer() {
    let fx = Fixture::new();
    let (_, a) = fx.corpus(GEN, "a");
    let (_, b) = fx.corpus(&GEN.replace("seed = 3", "seed = 4"), "b");
    let (_, target) = fx.corpus(&GEN.replace("seed = 3", "seed = 5"), "target");
    let model = fx.path("gac.txt");
    ok(&["gac", "--input", p(&a), "--input", p(&b), "--output", p(&model), "--grid", "0.01,0.1"]);
    let m = load_model(&std::fs::read(&model).unwrap()).unwrap();
    assert_eq!(m.sources, vec!["a", "b"]);
    let cv: serde_json::Value =
        serde_json::from_slice(&std::fs::read(with_suffix(&model, ".cv.json")).unwrap()).unwrap();
    assert_eq!(cv["n"], 600);

    let before = std::fs::read(&model).unwrap();
    let out = fx.path("transfer.json");
    ok(&["transfer", "--model", p(&model), "--input", p(&target), "--output", p(&out)]);
    assert_eq!(std::fs::read(&model).unwrap(), before);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(with_suffix(&out, ".manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["model_sources"], serde_json::json!(["a", "b"]));
    assert_eq!(manifest["config"]["target"], "target");
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert!(r["ece"].as_f64().unwrap() < 0.2);

    // mismatched columns are rejected
    let narrow = fx.path("narrow.csv");
    ok(&["extract", "--input", p(&fx.path("target.jsonl")), "--output", p(&narrow), "--categories", "position"]);
    let run = trajcal(&["transfer", "--model", p(&model), "--input", p(&narrow), "--output", p(&out)]);
    assert_eq!(run.status.code(), Some(42));
}

#[test]
fn baselines_rows_and_summary() {
    let fx = Fixture::new();
    let input = fx.write("three.jsonl", THREE);
    let out = fx.path("b.csv");
    ok(&["baselines", "--input", p(&input), "--output", p(&out), "--fit-frac", "0.5"]);
    let rows = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = rows.lines().collect();
    assert_eq!(lines[0], "id,method,raw_confidence,scaled_confidence");
    assert_eq!(lines.len(), 1 + 3 + 3 + 1);
    assert!(lines.iter().any(|l| l.starts_with("c,verbalized,0.85,")));
    assert!(lines.contains(&"b,last_step,0.4,0.4") || lines.iter().any(|l| l.starts_with("b,last_step,0.4,")));
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(with_suffix(&out, ".summary.json")).unwrap()).unwrap();
    let methods = summary["methods"].as_array().unwrap();
    assert_eq!(methods.len(), 3);
    assert_eq!(methods[0]["method"], "last_step");
    assert_eq!(methods[0]["labelled"], 2);
    assert_eq!(methods[2]["rows"], 1);

    let run = trajcal(&["baselines", "--input", p(&input), "--output", p(&out), "--fit-frac", "1.5"]);
    assert_eq!(run.status.code(), Some(62));
}

#[test]
fn synth_writes_trace_and_oracle_and_honours_overrides() {
    let fx = Fixture::new();
    let cfg = fx.write("g.toml", GEN);
    let (a, b, c) = (fx.path("a.jsonl"), fx.path("b.jsonl"), fx.path("c.jsonl"));
    ok(&["synth", "--input", p(&cfg), "--output", p(&a)]);
    ok(&["synth", "--input", p(&cfg), "--output", p(&b)]);
    ok(&["synth", "--input", p(&cfg), "--output", p(&c), "--seed", "4", "--k", "2"]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(
        std::fs::read(with_suffix(&a, ".oracle.csv")).unwrap(),
        std::fs::read(with_suffix(&b, ".oracle.csv")).unwrap()
    );
    let text_c = std::fs::read_to_string(&c).unwrap();
    assert!(text_c.starts_with(r#"{"format":"trajcal-trace","version":1,"k":2}"#));
    assert_ne!(std::fs::read(&a).unwrap(), text_c.as_bytes());
    let oracle = std::fs::read_to_string(with_suffix(&a, ".oracle.csv")).unwrap();
    assert_eq!(oracle.lines().count(), 301);
}

#[test]
fn end_to_end_on_two_thousand_records() {
    let fx = Fixture::new();
    let gen = GEN.replace("n_trajectories = 300", "n_trajectories = 2000");
    let (traces, table) = fx.corpus(&gen, "big");
    let model = fx.path("big.txt");
    let report = fx.path("big.json");
    ok(&["train", "--input", p(&table), "--output", p(&model)]);
    ok(&["eval", "--model", p(&model), "--input", p(&table), "--output", p(&report)]);
    for primary in [&traces, &table, &model, &report] {
        let m = with_suffix(primary, ".manifest.json");
        assert!(m.exists(), "{}", m.display());
    }
    let r: EvalReport = {
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
        assert_eq!(v["n"], 2000);
        let _ = v;
        let m = load_model(&std::fs::read(&model).unwrap()).unwrap();
        let d = FeatureTable::read(&table).unwrap().into_dataset("big").unwrap();
        evaluate(
            &PredictionSet::new(m.predict_rows(d.features.view()).unwrap(), d.labels).unwrap(),
            10,
        )
        .unwrap()
    };
    assert!(r.ece < 0.05, "in-sample ECE {}", r.ece);
}
