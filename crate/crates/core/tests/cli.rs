use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use multiarm::config::{RunConfig, CONFIG_ENV_VAR};
use multiarm::neural::NetShape;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_multiarm"));
    c.env_remove(CONFIG_ENV_VAR);
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn smoke_tasks() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/smoke_tasks.jsonl")
}

/// A config small enough for a few seconds of training.
fn tiny_config(dir: &Path) -> PathBuf {
    let mut c = RunConfig::default();
    c.workers = 1;
    c.seed = 9;
    c.sac.batch_size = 16;
    c.sac.warmup_steps = 32;
    c.sac.replay_capacity = 2000;
    c.sac.policy_shape = NetShape::policy(8, &[16]);
    c.sac.q_shape = NetShape::q(8, &[16]);
    c.env.max_steps = 40;
    c.expert.max_steps = 40;
    c.train.total_env_steps = 300;
    c.train.max_level = 1;
    c.bc.epochs = 2;
    let path = dir.join("tiny.toml");
    std::fs::write(&path, c.to_toml_string().unwrap()).unwrap();
    path
}

#[test]
fn gen_tasks_is_byte_reproducible_and_independent_of_workers() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    let c = dir.path().join("c.jsonl");
    ok(&["--seed", "3", "--workers", "1", "gen-tasks", "--k", "1-3", "--count", "12", "--mode", "dynamic", "--out", p(&a)]);
    ok(&["--seed", "3", "--workers", "1", "gen-tasks", "--k", "1-3", "--count", "12", "--mode", "dynamic", "--out", p(&b)]);
    ok(&["--seed", "3", "--workers", "2", "gen-tasks", "--k", "1-3", "--count", "12", "--mode", "dynamic", "--out", p(&c)]);
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    assert_eq!(bytes, std::fs::read(&c).unwrap());
    let record = std::fs::read_to_string(dir.path().join("a.jsonl.run.toml")).unwrap();
    assert!(record.contains("version = \"multiarm "));
    assert!(record.contains("gen-tasks"));
}

#[test]
fn flags_beat_files_and_files_beat_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("seed.toml");
    std::fs::write(&cfg, "seed = 3\n").unwrap();
    let gen = |extra: &[&str], env: Option<&Path>, name: &str| -> Vec<u8> {
        let out = dir.path().join(name);
        let mut args: Vec<&str> = extra.to_vec();
        args.extend(["gen-tasks", "--k", "2", "--count", "3", "--out", p(&out)]);
        let mut c = bin();
        if let Some(e) = env {
            c.env(CONFIG_ENV_VAR, e);
        }
        let o = c.args(&args).output().unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(out).unwrap()
    };
    let seed3 = gen(&["--seed", "3"], None, "s3");
    let seed4 = gen(&["--seed", "4"], None, "s4");
    let default = gen(&[], None, "d");
    assert_ne!(seed3, seed4);
    assert_ne!(seed3, default);
    assert_eq!(gen(&["--config", p(&cfg)], None, "f"), seed3);
    assert_eq!(gen(&[], Some(&cfg), "e"), seed3);
    assert_eq!(gen(&["--config", p(&cfg), "--seed", "4"], None, "fs"), seed4);
    assert_eq!(gen(&["--seed", "4"], Some(&cfg), "es"), seed4);
    assert_eq!(gen(&["--config", p(&cfg), "--set", "seed=4"], None, "fo"), seed4);
}

#[test]
fn bad_invocations_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let missing = dir.path().join("missing.jsonl");
    let bad_cfg = dir.path().join("bad.toml");
    std::fs::write(&bad_cfg, "[env]\nmax_step = 3\n").unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["gen-tasks", "--k", "2", "--count", "3", "--out", p(&out), "--bogus"],
        vec!["gen-tasks", "--k", "0-2", "--count", "3", "--out", p(&out)],
        vec!["gen-tasks", "--k", "2", "--count", "3", "--mode", "sideways", "--out", p(&out)],
        vec!["--set", "env.nope=1", "gen-tasks", "--k", "2", "--count", "3", "--out", p(&out)],
        vec!["--config", p(&bad_cfg), "gen-tasks", "--k", "2", "--count", "3", "--out", p(&out)],
        vec!["--config", p(&missing), "gen-tasks", "--k", "2", "--count", "3", "--out", p(&out)],
        vec!["gen-expert", "--tasks", p(&missing), "--out", p(&out)],
        vec!["eval", "--checkpoint", p(&missing), "--tasks", p(&missing), "--out", p(&out)],
        vec!["train", "--tasks", p(&missing), "--out", p(&out)],
        vec!["nonsense"],
    ];
    for args in cases {
        let o = run(&args);
        assert!(!o.status.success(), "{args:?} should fail");
        assert!(!o.stderr.is_empty());
    }
}

#[test]
fn gen_expert_resumes_a_truncated_file() {
    let dir = tempfile::tempdir().unwrap();
    let tasks = dir.path().join("t.jsonl");
    let full = dir.path().join("full.jsonl");
    let part = dir.path().join("part.jsonl");
    ok(&["--seed", "2", "gen-tasks", "--k", "1-2", "--count", "6", "--out", p(&tasks)]);
    ok(&["--seed", "2", "--workers", "1", "gen-expert", "--tasks", p(&tasks), "--out", p(&full)]);
    let bytes = std::fs::read(&full).unwrap();
    let second_newline = bytes.iter().enumerate().filter(|(_, b)| **b == b'\n').nth(1).unwrap().0;
    std::fs::write(&part, &bytes[..second_newline + 10]).unwrap();
    ok(&["--seed", "2", "--workers", "2", "gen-expert", "--tasks", p(&tasks), "--out", p(&part)]);
    assert_eq!(std::fs::read(&part).unwrap(), bytes);
}

#[test]
fn train_eval_rollout_bench_and_ablate_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let c = p(&cfg);
    let tasks = smoke_tasks();
    let experts = dir.path().join("experts.jsonl");
    ok(&["--config", c, "gen-expert", "--tasks", p(&tasks), "--out", p(&experts)]);

    // Training twice from the same seed gives the same bytes.
    let runs: Vec<PathBuf> = (0..2).map(|i| dir.path().join(format!("run{i}"))).collect();
    for r in &runs {
        ok(&["--config", c, "train", "--tasks", p(&tasks), "--experts", p(&experts), "--out", p(r)]);
    }
    for name in ["metrics.csv", "checkpoint.json"] {
        assert!(std::fs::read(runs[0].join(name)).unwrap() == std::fs::read(runs[1].join(name)).unwrap(), "{name}");
    }
    assert!(runs[0].join("run.toml").is_file());
    let ckpt = runs[0].join("checkpoint.json");

    let no_expert = dir.path().join("no-expert");
    ok(&["--config", c, "train", "--tasks", p(&tasks), "--ablation", "no-expert", "--out", p(&no_expert)]);
    assert!(!run(&["--config", c, "train", "--tasks", p(&tasks), "--out", p(&dir.path().join("x"))]).status.success());
    let bc = dir.path().join("bc");
    ok(&["--config", c, "train", "--tasks", p(&tasks), "--experts", p(&experts), "--ablation", "bc", "--out", p(&bc)]);

    let evals: Vec<PathBuf> = (0..2).map(|i| dir.path().join(format!("eval{i}"))).collect();
    for e in &evals {
        let stdout = ok(&["--config", c, "eval", "--checkpoint", p(&ckpt), "--tasks", p(&tasks), "--out", p(e)]);
        assert!(stdout.contains("success rate"));
    }
    for name in ["report.json", "report.csv"] {
        assert_eq!(std::fs::read(evals[0].join(name)).unwrap(), std::fs::read(evals[1].join(name)).unwrap());
    }
    let birrt = dir.path().join("birrt");
    ok(&["--config", c, "eval", "--birrt", "--tasks", p(&tasks), "--out", p(&birrt)]);
    assert!(birrt.join("report.json").is_file());

    let log = dir.path().join("episode.jsonl");
    ok(&["--config", c, "rollout", "--checkpoint", p(&ckpt), "--tasks", p(&tasks), "--task-id", "0", "--out", p(&log)]);
    assert!(std::fs::read_to_string(&log).unwrap().lines().count() >= 2);
    assert!(!run(&["--config", c, "rollout", "--checkpoint", p(&ckpt), "--tasks", p(&tasks), "--task-id", "999", "--out", p(&log)])
        .status
        .success());

    let bench = dir.path().join("bench.csv");
    ok(&["--config", c, "bench", "--checkpoint", p(&ckpt), "--tasks", p(&tasks), "--per-k", "1", "--out", p(&bench)]);
    let text = std::fs::read_to_string(&bench).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(!run(&["--config", c, "bench", "--tasks", p(&tasks), "--repetitions", "3", "--out", p(&bench)]).status.success());

    let table = dir.path().join("ablation.csv");
    let ours = format!("ours={}", p(&ckpt));
    let ne = format!("no-expert={}", p(&no_expert.join("checkpoint.json")));
    let gone = format!("selfish={}", p(&dir.path().join("nothing.json")));
    ok(&["--config", c, "ablate", "--entry", &ours, "--entry", &ne, "--entry", &gone, "--tasks", p(&tasks), "--out", p(&table)]);
    let text = std::fs::read_to_string(&table).unwrap();
    assert!(text.starts_with("method,k1,k2,k3,k4\n"));
    assert!(text.lines().any(|l| l.starts_with("selfish,") && l.contains("absent")));
}
