use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

fn crnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn write_corpus(dir: &Path) -> String {
    let words = ["the", "river", "stone", "layer", "of", "and", "light", "model", "a", "to"];
    let mut text = String::new();
    let mut state = 17u64;
    while text.len() < 12_000 {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        text.push_str(words[(state >> 33) as usize % words.len()]);
        text.push(if (state >> 20).is_multiple_of(9) { '\n' } else { ' ' });
    }
    let path = dir.join("corpus.txt");
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn help_exits_zero() {
    let o = crnet(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("grad-check"));
}

#[test]
fn unknown_flag_is_an_error() {
    let o = crnet(&["cost", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn cost_prints_full_rank_flops() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = crnet(&["cost", "--preset", "llama2-350m", "--method", "full_rank", "--out", out]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("4.838e11"), "{}", stdout(&o));
    let report = read_json(&dir.path().join("cost.json"));
    assert_eq!(report["config"]["method"], "full_rank");
    assert_eq!(report["config"]["gcp_mode"], "none");
}

#[test]
fn precedence_is_preset_then_file_then_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"cost": {"batch": 3, "seq_len": 128}}"#).unwrap();
    let out = dir.path().join("out");
    let o = crnet(&[
        "cost",
        "--preset",
        "llama2-60m",
        "--config",
        cfg.to_str().unwrap(),
        "--batch",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let resolved = read_json(&out.join("resolved_config.json"));
    assert_eq!(resolved["cost"]["batch"], 5);
    assert_eq!(resolved["cost"]["seq_len"], 128);
    assert_eq!(resolved["cost"]["hidden"], 512);
}

#[test]
fn malformed_config_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"cost": {"batch": "many"}}"#).unwrap();
    let o = crnet(&["cost", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    std::fs::write(&cfg, "{not json").unwrap();
    let o = crnet(&["cost", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn grad_check_tiny_passes_and_strict_tolerance_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = crnet(&["grad-check", "--preset", "tiny", "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let report = read_json(&dir.path().join("grad_check.json"));
    assert_eq!(report["pass"], true);
    assert_eq!(report["report"]["groups"].as_object().unwrap().len(), 6);
    let o = crnet(&["grad-check", "--preset", "tiny", "--tol", "1e-14", "--out", out]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn recompute_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = crnet(&["recompute-check", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let csv = std::fs::read_to_string(dir.path().join("reconstruction.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 9 * 7);
}

#[test]
fn pipeline_cost_reports_both_methods() {
    let dir = tempfile::tempdir().unwrap();
    let o = crnet(&["pipeline-cost", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let r = read_json(&dir.path().join("pipeline.json"));
    assert_eq!(r.as_array().unwrap().len(), 2);
    let gib = r[0]["comm_volume_gib"].as_f64().unwrap();
    assert!((gib - 1.875).abs() < 1e-12);
}

#[test]
fn seeded_outputs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = crnet(&[
            "theorem-check",
            "--trials",
            "3",
            "--seed",
            "4",
            "--out",
            d.path().to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0));
    }
    let fa = std::fs::read(a.path().join("theorem.json")).unwrap();
    let fb = std::fs::read(b.path().join("theorem.json")).unwrap();
    assert_eq!(fa, fb);
}

#[test]
fn train_analyze_and_dump() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path());
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--corpus", &corpus, "--steps", "6", "--batch", "2", "--seed", "3"];
        args.extend_from_slice(extra);
        let out_s = out.to_str().unwrap().to_string();
        args.extend_from_slice(&["--out", &out_s]);
        let o = crnet(&args);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let a = run("a", &[]);
    let b = run("b", &[]);
    let log_a = std::fs::read(a.join("metrics.jsonl")).unwrap();
    assert_eq!(log_a, std::fs::read(b.join("metrics.jsonl")).unwrap());
    assert_eq!(String::from_utf8(log_a).unwrap().lines().count(), 6);
    assert!(a.join("crnet.ckpt").exists());
    let resolved = read_json(&a.join("resolved_config.json"));
    assert_eq!(resolved["train"]["total_steps"], 6);
    assert_eq!(resolved["model"]["seed"], 3);

    let full = run("full", &["--arch", "full_rank"]);
    let an = dir.path().join("analysis");
    let o = crnet(&[
        "analyze",
        "--checkpoint",
        full.to_str().unwrap(),
        "--corpus",
        &corpus,
        "--windows",
        "2",
        "--out",
        an.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(an.join("residual_stats.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 7);

    let o = crnet(&[
        "analyze",
        "--checkpoint",
        a.to_str().unwrap(),
        "--corpus",
        &corpus,
        "--out",
        an.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));

    let dump = dir.path().join("dump");
    let o = crnet(&[
        "dump-activations",
        "--checkpoint",
        a.to_str().unwrap(),
        "--corpus",
        &corpus,
        "--out",
        dump.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read_dir(dump.join("activations")).unwrap().count(), 4 * 7);
}

#[test]
fn train_without_corpus_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = crnet(&["train", "--steps", "1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}
