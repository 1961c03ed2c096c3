use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use groov_core::corpus::load_corpus;
use groov_core::synth::{generate, split_at, SynthConfig};

fn groov() -> Command {
    Command::new(env!("CARGO_BIN_EXE_groov"))
}

fn run(args: &[&str]) -> Output {
    groov().args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate(&SynthConfig {
            instances: 160,
            ..SynthConfig::default()
        })
        .unwrap();
        let (train, test) = split_at(&corpus, 130);
        train.write_jsonl(dir.path().join("train.jsonl")).unwrap();
        test.write_jsonl(dir.path().join("test.jsonl")).unwrap();
        Workspace { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn p(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }

    fn train(&self, out: &str, seed: &str) -> Output {
        run(&[
            "train", "--train", &self.p("train.jsonl"), "--epochs", "2", "--out", &self.p(out), "--lr", "3e-3",
            "--batch-size", "8", "--embed-dim", "16", "--ffn-dim", "32", "--max-input-len", "48",
            "--max-output-len", "32", "--seed", seed,
        ])
    }
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn help_documents_training_defaults() {
    let predict = String::from_utf8(run(&["predict", "--help"]).stdout).unwrap();
    assert!(predict.contains("[default: 15]"));
    let train = String::from_utf8(run(&["train", "--help"]).stdout).unwrap();
    assert!(train.contains("[default: 0.0001]"));
    assert!(train.contains("[default: 32]"));
}

#[test]
fn usage_errors_exit_2_with_prefix() {
    let out = run(&["train", "--bogus"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).starts_with("groov:"));
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["predict", "--ckpt", "a", "--input", "b", "--out", "c", "--beam", "0"])), 2);
}

#[test]
fn runtime_errors_exit_1_with_prefix() {
    let ws = Workspace::new();
    let out = run(&["predict", "--ckpt", &ws.p("missing.ckpt"), "--input", &ws.p("test.jsonl"), "--out", &ws.p("p")]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).starts_with("groov: loading"));
    std::fs::write(ws.path("bad.jsonl"), "{\"id\": 1}\n").unwrap();
    let out = run(&[
        "split-ov", "--train", &ws.p("bad.jsonl"), "--test", &ws.p("test.jsonl"), "--n-labels", "1", "--out",
        &ws.p("o"),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("line 1"));
}

#[test]
fn split_is_deterministic_and_leaves_inputs_alone() {
    let ws = Workspace::new();
    let before = (read(&ws.path("train.jsonl")), read(&ws.path("test.jsonl")));
    for out in ["a", "b"] {
        let o = run(&[
            "split-ov", "--train", &ws.p("train.jsonl"), "--test", &ws.p("test.jsonl"), "--n-labels", "5",
            "--seed", "3", "--out", &ws.p(out),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["train.jsonl", "test.jsonl", "removed_labels.txt", "seen_labels.txt"] {
        assert_eq!(read(&ws.path(&format!("a/{f}"))), read(&ws.path(&format!("b/{f}"))), "{f}");
    }
    assert_eq!(before, (read(&ws.path("train.jsonl")), read(&ws.path("test.jsonl"))));
    let removed = String::from_utf8(read(&ws.path("a/removed_labels.txt"))).unwrap();
    let (train, _) = load_corpus(ws.path("a/train.jsonl")).unwrap();
    for label in removed.lines() {
        assert!(train.instances.iter().all(|i| !i.has_label(label)));
    }
}

#[test]
fn training_is_byte_reproducible_under_seed() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.train("a.ckpt", "5")), 0);
    assert_eq!(code(&ws.train("b.ckpt", "5")), 0);
    assert_eq!(code(&ws.train("c.ckpt", "6")), 0);
    assert_eq!(read(&ws.path("a.ckpt")), read(&ws.path("b.ckpt")));
    assert_ne!(read(&ws.path("a.ckpt")), read(&ws.path("c.ckpt")));
}

#[test]
fn epoch_log_is_json_lines() {
    let ws = Workspace::new();
    let out = ws.train("m.ckpt", "0");
    let lines: Vec<serde_json::Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    for key in ["epoch", "mean_loss", "wall_seconds", "examples_seen"] {
        assert!(lines[1].get(key).is_some(), "{key}");
    }
}

#[test]
fn config_file_sets_defaults_and_flags_override() {
    let ws = Workspace::new();
    std::fs::write(
        ws.path("run.conf"),
        "# tiny model\nembed_dim = 16\nffn_dim = 32\nmax_input_len = 48\nmax_output_len = 32\nepochs = 3\n",
    )
    .unwrap();
    let out = run(&[
        "train", "--config", &ws.p("run.conf"), "--train", &ws.p("train.jsonl"), "--out", &ws.p("m.ckpt"),
        "--epochs", "1",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 1);

    std::fs::write(ws.path("bad.conf"), "learning_rate = 1\n").unwrap();
    let out = run(&["train", "--config", &ws.p("bad.conf"), "--train", "x", "--out", "y"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("unknown key"));
}

#[test]
fn predict_then_eval_with_exact_rule_only() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.train("m.ckpt", "0")), 0);
    let out = run(&[
        "predict", "--ckpt", &ws.p("m.ckpt"), "--input", &ws.p("test.jsonl"), "--beam", "3", "--out",
        &ws.p("pred.jsonl"), "--jobs", "2",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let preds = String::from_utf8(read(&ws.path("pred.jsonl"))).unwrap();
    let ids: Vec<String> = preds
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["id"].as_str().unwrap().to_string())
        .collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);
    assert_eq!(ids.len(), 30);

    let out = run(&[
        "eval", "--pred", &ws.p("pred.jsonl"), "--test", &ws.p("test.jsonl"), "--train", &ws.p("train.jsonl"),
        "--rules", "exact", "--out", &ws.p("report.json"),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("P (exact)") && !table.contains("lexical"));
    let report: serde_json::Value = serde_json::from_slice(&read(&ws.path("report.json"))).unwrap();
    let rules = report["rules"].as_array().unwrap();
    assert_eq!(rules.len(), 1);
    assert_eq!(rules[0]["rule"], "exact");
    assert_eq!(report["psp"].as_object().unwrap().len(), 3);

    let out = run(&[
        "eval", "--pred", &ws.p("pred.jsonl"), "--test", &ws.p("test.jsonl"), "--train", &ws.p("train.jsonl"),
        "--rules", "semantic",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn review_serve_answers_over_http() {
    let ws = Workspace::new();
    let seen = "red cup\n";
    std::fs::write(ws.path("seen.txt"), seen).unwrap();
    let (test, _) = load_corpus(ws.path("test.jsonl")).unwrap();
    let pred = serde_json::json!({
        "id": test.instances[0].id,
        "ranking_mode": "marginal",
        "predicted": [{"label": "novel thing", "score": 0.5}],
    });
    std::fs::write(ws.path("pred.jsonl"), format!("{pred}\n")).unwrap();
    let mut child = groov()
        .args([
            "review-serve", "--pred", &ws.p("pred.jsonl"), "--test", &ws.p("test.jsonl"), "--seen",
            &ws.p("seen.txt"), "--store", &ws.p("store.jsonl"), "--port", "0",
        ])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    if line.is_empty() {
        let mut err = String::new();
        child.stderr.take().unwrap().read_to_string(&mut err).unwrap();
        panic!("review-serve exited early: {err}");
    }
    let addr = line.trim().rsplit("http://").next().unwrap().to_string();
    let mut stream = TcpStream::connect(&addr).unwrap();
    write!(stream, "GET /api/stats HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").unwrap();
    let mut resp = String::new();
    stream.read_to_string(&mut resp).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(line.starts_with("serving 1 novel candidates"), "{line}");
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(resp.contains("\"coverage\""));
}
