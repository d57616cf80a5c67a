use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lada(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lada"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn lada")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = r#"{
  "gan": {"steps": 2, "batch": 4},
  "surrogate": {"pretrain": {"epochs": 1, "batch": 4}},
  "sampler": {"steps": 2},
  "loop": {"T": 2, "B": 3, "initial_size": 8, "test_size": 4, "finetune": {"epochs": 1, "batch": 4}}
}"#;

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.json");
    fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn gradcheck_passes() {
    let o = lada(&["gradcheck", "--points", "8"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    assert!(s.lines().filter(|l| l.ends_with(" ok")).count() > 10, "{s}");
    assert!(!s.contains("FAIL"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&lada(&["gradcheck", "--bogus"])), 1);
    assert_eq!(code(&lada(&["frobnicate"])), 1);
    assert_eq!(code(&lada(&[])), 1);
    assert_eq!(code(&lada(&["--help"])), 0);
}

#[test]
fn validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"loop":{"T":0}}"#).unwrap();
    let o = lada(&["--config", bad.to_str().unwrap(), "gen-data"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("/loop/T"));
    let unknown = dir.path().join("unknown.json");
    fs::write(&unknown, r#"{"loops":{}}"#).unwrap();
    assert_eq!(code(&lada(&["--config", unknown.to_str().unwrap(), "gen-data"])), 1);
    assert_eq!(code(&lada(&["loop", "--strategy", "pool"])), 1);
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.ckpt");
    let out = dir.path().join("attack");
    let o = lada(&["--out", out.to_str().unwrap(), "attack-demo", "--f", missing.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gen_data_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = lada(&["--seed", "3", "--out", out.to_str().unwrap(), "gen-data", "--n", "5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(out.join("config.json").exists());
    assert!(out.join("masks/000004.pgm").exists());
}

#[test]
fn loop_is_reproducible_and_feeds_the_other_commands() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = lada(&[
            "--config", &cfg, "--seed", "7", "--out", out.to_str().unwrap(), "--threads", "1",
            "loop", "--strategy", "style_pred", "--T", "2", "--B", "3",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(fs::read(a.join("history.json")).unwrap(), fs::read(b.join("history.json")).unwrap());

    let ck = a.join("checkpoints");
    let f = ck.join("f_2.ckpt");
    let samples = dir.path().join("samples");
    let o = lada(&[
        "--config", &cfg, "--out", samples.to_str().unwrap(),
        "sample", "--strategy", "noise_pred", "--B", "2",
        "--f", f.to_str().unwrap(), "--g", ck.join("g_0.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["sample_0000.pgm", "sample_0001.pgm", "raw_0001.pgm", "provenance.json"] {
        assert!(samples.join(name).exists(), "{name}");
    }

    let attack = dir.path().join("attack");
    let o = lada(&["--out", attack.to_str().unwrap(), "attack-demo", "--f", f.to_str().unwrap(), "--n", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("legalized == original: 2/2"));

    let o = lada(&["eval", "--run", a.to_str().unwrap(), "--run", b.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows: serde_json::Value = serde_json::from_slice(&fs::read(a.join("eval/metrics.json")).unwrap()).unwrap();
    let names: Vec<&str> = rows.as_array().unwrap().iter().map(|r| r["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["pretrain (train)", "pretrain (test)", "style_pred", "style_pred"]);
    assert!(stdout(&o).starts_with("Item"));
}
