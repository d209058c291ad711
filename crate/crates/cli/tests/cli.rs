use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{"generator": {"n_queries": 120, "candidates_per_query": 20}, "train": {"epochs": 1}}"#;

fn seqmd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqmd"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn workdir() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("tiny.json"), TINY).unwrap();
    d
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn generate_is_deterministic_under_seed() {
    let d = workdir();
    for out in ["a", "b"] {
        let o = seqmd(d.path(), &["generate", "--seed", "7", "--config", "tiny.json", "--out", out]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = read(d.path().join("a/data.jsonl"));
    assert_eq!(a, read(d.path().join("b/data.jsonl")));
    assert_eq!(a.lines().next().unwrap(), r#"{"m":10,"p":10,"R":4}"#);
    assert_eq!(a.lines().count(), 121);

    let o = seqmd(d.path(), &["generate", "--seed", "8", "--config", "tiny.json", "--out", "c"]);
    assert_eq!(code(&o), 0);
    assert_ne!(a, read(d.path().join("c/data.jsonl")));

    let manifest: serde_json::Value = serde_json::from_str(&read(d.path().join("a/manifest.json"))).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config"]["generator"]["seed"], 7);
    assert!(manifest["finished"].is_string());
}

#[test]
fn usage_errors_exit_2() {
    let d = workdir();
    std::fs::write(d.path().join("bad.json"), r#"{"generator": {"region_weights": [0.5, 0.6, 0.1, 0.1]}}"#).unwrap();
    std::fs::write(d.path().join("typo.json"), r#"{"sead": 1}"#).unwrap();
    let cases: &[&[&str]] = &[
        &[],
        &["frobnicate"],
        &["generate", "--config", "bad.json"],
        &["generate", "--config", "typo.json"],
        &["generate", "--config", "missing.json"],
        &["compare", "--config", "tiny.json", "--models", "shared_bottom,transformer"],
        &["compare", "--config", "tiny.json", "--models", "ple,seq+md"],
        &["train", "--config", "tiny.json", "--tasks", "4"],
        &["train", "--config", "tiny.json", "--model", "ple", "--no-regularizer"],
        &["train", "--data", "nowhere.jsonl"],
        &["experiment", "bogus"],
        &["params", "--model", "lstm"],
        &["params", "--tasks", "2,x"],
    ];
    for args in cases {
        let o = seqmd(d.path(), args);
        assert_eq!(code(&o), 2, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn malformed_data_is_a_runtime_error() {
    let d = workdir();
    std::fs::write(d.path().join("broken.jsonl"), "{\"m\":10,\"p\":10,\"R\":4}\nnot json\n").unwrap();
    let o = seqmd(d.path(), &["split", "--data", "broken.jsonl"]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn existing_outputs_need_force() {
    let d = workdir();
    let args = ["generate", "--config", "tiny.json", "--out", "g"];
    assert_eq!(code(&seqmd(d.path(), &args)), 0);
    assert_eq!(code(&seqmd(d.path(), &args)), 2);
    let mut forced = args.to_vec();
    forced.push("--force");
    assert_eq!(code(&seqmd(d.path(), &forced)), 0);
}

#[test]
fn reference_only_compare_has_zero_deltas() {
    let d = workdir();
    let o = seqmd(d.path(), &["compare", "--config", "tiny.json", "--models", "shared_bottom", "--out", "c"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(d.path().join("c/ndcg.csv"));
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let (delta, groups) = (col("delta_pct"), col("groups"));
    let mut rows = 0;
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        // a slice without scored groups has no delta
        if cells[groups] == "0" {
            assert_eq!(cells[delta], "", "{line}");
            continue;
        }
        assert_eq!(cells[delta].parse::<f64>().unwrap(), 0.0, "{line}");
        rows += 1;
    }
    assert!(rows > 0);
    for f in ["ndcg.txt", "domestic.csv", "domestic.txt", "training.csv"] {
        assert!(d.path().join("c").join(f).exists(), "{f}");
    }
}

#[test]
fn train_then_eval_against_reference() {
    let d = workdir();
    let gen = seqmd(d.path(), &["generate", "--config", "tiny.json", "--out", "data"]);
    assert_eq!(code(&gen), 0);
    for (out, model) in [("sb", "shared_bottom"), ("seq", "seq")] {
        let mut args = vec!["train", "--config", "tiny.json", "--data", "data/data.jsonl", "--model", model, "--out", out];
        if model == "seq" {
            args.extend(["--md", "in_sequence"]);
        }
        let o = seqmd(d.path(), &args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(d.path().join(out).join("model.ckpt").exists());
        assert!(d.path().join(out).join("train_report.json").exists());
    }

    let eval = |checkpoints: &[&str], out: &str| {
        let mut args = vec!["eval", "--config", "tiny.json", "--data", "data/data.jsonl", "--out", out];
        for c in checkpoints {
            args.extend(["--checkpoint", c]);
        }
        seqmd(d.path(), &args)
    };
    let o = eval(&["sb/model.ckpt", "seq/model.ckpt"], "ev");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(d.path().join("ev/ndcg.csv"));
    assert!(csv.lines().any(|l| l.starts_with("shared_bottom,purchase,all,")));
    assert!(csv.lines().any(|l| l.starts_with("seq+md,purchase,all,")));

    let o = eval(&["seq/model.ckpt"], "ev2");
    assert_eq!(code(&o), 2);
    assert!(!d.path().join("ev2/ndcg.csv").exists());
}

#[test]
fn params_reports_growth() {
    let d = workdir();
    let o = seqmd(d.path(), &["params", "--out", "p"]);
    assert_eq!(code(&o), 0);
    let csv = read(d.path().join("p/params.csv"));
    for row in ["shared_bottom,2,7602", "shared_bottom,3,10803", "seq,2,11781", "seq,3,12201"] {
        assert!(csv.lines().any(|l| l == row), "{row} missing from\n{csv}");
    }
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("+42.11%"), "{stdout}");

    let o = seqmd(d.path(), &["params", "--model", "seq", "--md", "in_sequence", "--out", "q"]);
    assert_eq!(code(&o), 0);
    let csv = read(d.path().join("q/params.csv"));
    assert!(csv.lines().any(|l| l == "seq+md,2,11495"), "{csv}");
    assert!(csv.lines().any(|l| l == "seq+md,3,11652"), "{csv}");
}

#[test]
fn split_writes_a_partition() {
    let d = workdir();
    let o = seqmd(d.path(), &["split", "--config", "tiny.json", "--out", "s"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let split: serde_json::Value = serde_json::from_str(&read(d.path().join("s/feature_split.json"))).unwrap();
    let mut all: Vec<u64> = ["country_idx", "dependent_idx", "invariant_idx"]
        .iter()
        .flat_map(|k| split[k].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()))
        .collect();
    all.sort_unstable();
    assert_eq!(all, (0..20).collect::<Vec<_>>());
    assert_eq!(split["country_idx"], serde_json::json!([6, 7, 8, 9]));
}
