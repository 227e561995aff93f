use std::path::Path;
use std::process::{Command, Output};

fn dforge(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dforge"));
    c.current_dir(dir).args(args);
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = dforge(dir, args, &[]);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited")
}

const JOB: &str = r#"
tokenizer = "tok.model"
train_corpus = "gen.jsonl"
val_corpus = "nlu/val.jsonl"
out_dir = "runs/s1"

[model]
layers = 1
hidden = 16

[train]
batch_tokens = 128
max_steps = 10
dropout = 0.0
seed = 3
eval_every = 5
checkpoint_every = 5

[train.schedule]
peak_lr = 3e-3
min_lr = 1e-4
warmup_steps = 2
decay_steps = 10
"#;

fn prepared() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["corpus", "gen-text", "--sentences", "200", "--seed", "1", "--output", "gen.jsonl"]);
    ok(p, &["corpus", "gen-nlu", "--train", "40", "--val", "15", "--test", "15", "--seed", "2", "--out", "nlu"]);
    ok(p, &["tokenizer", "train", "--input", "gen.jsonl", "--input", "nlu/train.jsonl", "--vocab-size", "120", "--output", "tok.model"]);
    std::fs::write(p.join("job.toml"), JOB).unwrap();
    d
}

#[test]
fn small_flow_with_overrides_and_resume() {
    let d = prepared();
    let p = d.path();
    let first: serde_json::Value = serde_json::from_str(&ok(p, &["pretrain", "--config", "job.toml"])).unwrap();
    assert_eq!(first["step"], 10);

    let out = dforge(p, &["pretrain", "--config", "job.toml", "--resume"], &[("DFORGE_TRAIN__MAX_STEPS", "15")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let resumed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(resumed["step"], 15);

    let ppl: serde_json::Value = serde_json::from_str(&ok(
        p,
        &["eval", "perplexity", "--ckpt", "runs/s1/model", "--tokenizer", "tok.model", "--corpus", "nlu/test.jsonl"],
    ))
    .unwrap();
    let v = ppl["perplexity"].as_f64().unwrap();
    assert!(v.is_finite() && v > 1.0);

    let summary = ok(
        p,
        &["finetune", "--mode", "frozen", "--data", "nlu", "--ckpt", "runs/s1/model", "--tokenizer", "tok.model", "--seeds", "1", "--out", "ft"],
    );
    assert!(summary.contains("semer"));
    assert!(p.join("ft/seed-1").is_dir() && p.join("ft/summary.json").is_file());
    let m: serde_json::Value = serde_json::from_str(&ok(
        p,
        &["eval", "nlu", "--bundle", "ft/seed-1", "--tokenizer", "tok.model", "--data", "nlu/test.jsonl"],
    ))
    .unwrap();
    assert_eq!(m["examples"], 15);
}

#[test]
fn corpus_commands_write_records() {
    let d = prepared();
    let p = d.path();
    ok(p, &["corpus", "spokenform", "--input", "gen.jsonl", "--output", "spoken.jsonl"]);
    ok(p, &["corpus", "mix", "--input", "gen.jsonl", "--input", "spoken.jsonl", "--ratio", "0.7,0.3", "--size", "50", "--seed", "4", "--output", "mix.jsonl"]);
    ok(p, &["corpus", "dedup", "--input", "mix.jsonl", "--output", "dd.jsonl"]);
    ok(p, &["corpus", "pack", "--input", "gen.jsonl", "--output", "packed.jsonl", "--target-words", "20"]);
    ok(p, &["corpus", "filter", "--input", "gen.jsonl", "--output", "f.jsonl", "--tokenizer", "tok.model", "--min-tokens", "3"]);
    let dist: serde_json::Value = serde_json::from_str(&ok(
        p,
        &["corpus", "sample", "--input", "mix.jsonl", "--output", "s.jsonl", "--alpha", "0.3", "--size", "20", "--seed", "1"],
    ))
    .unwrap();
    assert!((dist["probs"]["en"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    let lines = |f: &str| std::fs::read_to_string(p.join(f)).unwrap().lines().count();
    assert_eq!(lines("mix.jsonl"), 50);
    assert_eq!(lines("s.jsonl"), 20);
    assert!(lines("packed.jsonl") < 200);
}

#[test]
fn exit_codes() {
    let d = prepared();
    let p = d.path();
    // validation and configuration
    assert_eq!(code(&dforge(p, &["corpus", "mix", "--input", "gen.jsonl", "--ratio", "1,2", "--size", "5", "--output", "x.jsonl"], &[])), 2);
    assert_eq!(code(&dforge(p, &["eval", "correlate", "--x", "1,2,3", "--y", "4,4,4"], &[])), 2);
    assert_eq!(code(&dforge(p, &["report", "--workdir", "."], &[])), 2);
    assert_eq!(code(&dforge(p, &["pretrain", "--config", "job.toml"], &[("DFORGE_TRAIN__BATCH_TOKENS", "\"many\"")])), 2);
    // numeric divergence
    let boom = dforge(p, &["pretrain", "--config", "job.toml"], &[("DFORGE_OUT_DIR", "runs/boom"), ("DFORGE_TRAIN__SCHEDULE__PEAK_LR", "1e300")]);
    assert_eq!(code(&boom), 3, "{}", String::from_utf8_lossy(&boom.stderr));
    // i/o
    assert_eq!(code(&dforge(p, &["tokenizer", "metrics", "--tokenizer", "missing.model", "--input", "gen.jsonl"], &[])), 4);
    assert_eq!(code(&dforge(p, &["distill", "--plan", "missing.toml", "--out", "o"], &[])), 4);
}
