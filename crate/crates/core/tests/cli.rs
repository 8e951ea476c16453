use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY_LQR: &str = r#"
[problem]
name = "lqr"

[net]
widths = [2, 4, 1]
seed = 1

[operator]
eta = 0.5
tol = 1e-10

[grid]
steps = 6

[train]
batch_size = 2
epochs = 2
iterations_per_epoch = 5
seed = 2
audit_every = 5

[oracle]
held_out = 8

[neighborhood]
iterations = 10
eval_batch = 4
"#;

fn jfb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jfb-control")).args(args).output().expect("binary runs")
}

fn stderr_error(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().rev().find(|l| l.starts_with('{')).expect("json error line");
    serde_json::from_str::<Value>(line).unwrap()["error"].clone()
}

fn setup(text: &str) -> (tempfile::TempDir, String, String) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, text).unwrap();
    let out = dir.path().join("out");
    (dir, cfg.to_string_lossy().into_owned(), out.to_string_lossy().into_owned())
}

#[test]
fn every_subcommand_runs_on_a_tiny_problem() {
    let (_dir, cfg, out) = setup(TINY_LQR);
    for cmd in ["train", "compare", "diagnose", "oracle", "neighborhood"] {
        let o = jfb(&[cmd, "--config", &cfg, "--out", &out]);
        assert_eq!(o.status.code(), Some(0), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
        assert!(summary.is_object(), "{cmd}");
        let manifest: Value =
            serde_json::from_str(&fs::read_to_string(Path::new(&out).join("run.json")).unwrap()).unwrap();
        assert_eq!(manifest["run"]["command"], cmd);
    }
    for f in ["history.csv", "comparison.csv", "diagnostics.json", "oracle.csv", "neighborhood.csv", "final.bin"] {
        assert!(Path::new(&out).join(f).exists(), "{f}");
    }
}

#[test]
fn seed_override_is_recorded_in_headers() {
    let (_dir, cfg, out) = setup(TINY_LQR);
    let o = jfb(&["train", "--config", &cfg, "--out", &out, "--seed-override", "41", "--audit-every", "0"]);
    assert_eq!(o.status.code(), Some(0));
    let history = fs::read_to_string(Path::new(&out).join("history.csv")).unwrap();
    assert!(history.lines().any(|l| l == "# seed=41"));
    assert!(!Path::new(&out).join("diagnostics.csv").exists());
}

#[test]
fn config_errors_exit_with_code_two_and_name_the_key() {
    let (_dir, cfg, out) = setup(&TINY_LQR.replace("eta = 0.5", "eta = 0.5\nbogus = 1"));
    let o = jfb(&["train", "--config", &cfg, "--out", &out]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr_error(&o);
    assert_eq!(err["exit_code"], 2);
    assert_eq!(err["detail"]["path"], "operator.bogus");

    let o = jfb(&["train", "--config", "/nonexistent/c.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(jfb(&["fly"]).status.code(), Some(2));
    assert_eq!(jfb(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_with_code_one() {
    let (_dir, cfg, out) = setup(&TINY_LQR.replace("tol = 1e-10", "tol = 1e-10\nnode_budget = 10"));
    let o = jfb(&["train", "--config", &cfg, "--out", &out]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_error(&o)["exit_code"], 1);
}
