use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
category = "tex"
simulate_count = 3

[model]
image_size = 32
decoder_widths = [8, 8, 4, 4]
ca_reduction = 4
memory_size = 3

[model.encoder]
kind = "toy"
widths = [4, 8, 8, 8]
seed = 5

[train]
iterations = 3
log_every = 0

[eval]
top_k = 10

[bench]
warmup = 1
reps = 3
memory_sizes = [1, 2]

[toyset]
count = 4

[synth]
size = 32
n_train = 6
n_test_normal = 4

[synth.toy]
count = 4
"#;

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Env {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run.toml"), TINY).unwrap();
        let env = Env { dir };
        env.ok(&["synth"]);
        env
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_memseg"));
        cmd.args(args);
        if !args.is_empty() && !args.contains(&"--config") {
            cmd.arg("--config").arg(self.path("run.toml"));
        }
        if !args.is_empty() && !args.contains(&"--data-root") {
            cmd.arg("--data-root").arg(self.path("data"));
        }
        cmd.env("RUST_LOG", "warn").output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let o = self.run(args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    }

    fn out(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }
}

fn error_line(o: &Output) -> serde_json::Value {
    let err = String::from_utf8_lossy(&o.stderr);
    let last = err.lines().last().expect("stderr line");
    serde_json::from_str(last).expect("json error line")
}

/// CSV rows without the `#` comment header.
fn rows(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(str::to_owned)
        .collect()
}

#[test]
fn train_then_eval_is_reproducible() {
    let env = Env::new();
    for run in ["a", "b"] {
        env.ok(&["train", "--seed", "7", "--out", &env.out(run)]);
        let ck = env.path(run).join("checkpoint.safetensors");
        env.ok(&["eval", "--seed", "7", "--out", &env.out(run), "--checkpoint", ck.to_str().unwrap()]);
    }
    let a = rows(&env.path("a/eval_scores.csv"));
    assert_eq!(a.len(), 1 + 4 + 4);
    assert_eq!(a, rows(&env.path("b/eval_scores.csv")));
    assert_eq!(rows(&env.path("a/loss.csv")), rows(&env.path("b/loss.csv")));
    assert_eq!(rows(&env.path("a/loss.csv")).len(), 1 + 3);
    let summary = std::fs::read_to_string(env.path("a/eval_summary.txt")).unwrap();
    assert!(summary.contains("image_auroc:"));
    // the effective configuration travels with the artifacts
    assert!(summary.contains("# seed = 7"));
    let cfg = std::fs::read_to_string(env.path("a/config.toml")).unwrap();
    assert!(cfg.contains("seed = 7"));
}

#[test]
fn infer_scores_every_image() {
    let env = Env::new();
    env.ok(&["train", "--out", &env.out("t")]);
    let good = env.path("data/tex/test/good");
    let ck = env.path("t/checkpoint.safetensors");
    env.ok(&["infer", "--out", &env.out("i"), "--checkpoint", ck.to_str().unwrap(), "--input", good.to_str().unwrap()]);
    let r = rows(&env.path("i/scores.csv"));
    assert_eq!(r[0], "name,score");
    assert_eq!(r.len() - 1, std::fs::read_dir(&good).unwrap().count());
    for row in &r[1..] {
        let s: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&s));
        let stem = row.split(',').next().unwrap();
        assert!(env.path("i/maps").join(format!("{stem}.png")).is_file());
    }
}

#[test]
fn no_memory_flag_is_recorded() {
    let env = Env::new();
    env.ok(&["train", "--out", &env.out("t")]);
    let ck = env.path("t/checkpoint.safetensors");
    env.ok(&["eval", "--no-memory", "--out", &env.out("e"), "--checkpoint", ck.to_str().unwrap()]);
    let head = std::fs::read_to_string(env.path("e/eval_scores.csv")).unwrap();
    assert!(head.contains("memory=off"), "{head}");
    let cfg = std::fs::read_to_string(env.path("e/config.toml")).unwrap();
    assert!(cfg.contains("memory = false"));
}

#[test]
fn simulate_toyset_and_bench_write_artifacts() {
    let env = Env::new();
    env.ok(&["simulate", "--out", &env.out("s")]);
    for i in 0..3 {
        assert!(env.path(&format!("s/simulate/{i:03}.png")).is_file());
        assert!(env.path(&format!("s/simulate/{i:03}_mask.png")).is_file());
    }
    assert_eq!(rows(&env.path("s/simulate_log.csv")).len(), 4);

    env.ok(&["toyset", "--out", &env.out("y")]);
    let log = rows(&env.path("y/toyset/tex/toyset_log.csv"));
    assert_eq!(log.len(), 5);

    env.ok(&["bench", "--out", &env.out("b")]);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(env.path("b/bench.json")).unwrap()).unwrap();
    assert_eq!(v["report"]["timings"].as_array().unwrap().len(), 3);
    assert_eq!(v["report"]["memory_scaling"].as_array().unwrap().len(), 2);
    assert!(v["config"]["model"]["memory_size"].is_number());
}

#[test]
fn usage_errors_exit_2_with_json() {
    let env = Env::new();
    let o = env.run(&["train", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["kind"], "usage");

    let o = env.run(&["train", "--data-root", "/nonexistent/x", "--out", &env.out("n")]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["kind"], "missing_directory");

    let o = env.run(&["train", "--set", "train.iters=3", "--out", &env.out("n")]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["kind"], "config_parse");

    let o = env.run(&["train", "--image-size", "33", "--out", &env.out("n")]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["kind"], "invalid_config");
}

#[test]
fn runtime_errors_exit_1() {
    let env = Env::new();
    let bad = env.path("bad.safetensors");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let o = env.run(&["eval", "--out", &env.out("e"), "--checkpoint", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_line(&o)["kind"], "checkpoint");
}
