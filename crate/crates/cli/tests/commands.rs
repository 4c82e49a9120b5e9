use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "data": {"sizes": [[16, 16]], "count": 4},
  "model": {"width": 8, "heads": 2, "registers": 2},
  "stages": [{"height": 16, "width": 16, "steps": 4, "batch_size": 2, "leffa_enabled": true, "learning_rate": 0.001}],
  "eval": {"probe_count": 2, "probe_seed": 1000},
  "train": {"log_every": 2}
}"#;

fn leffa(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_leffa")).args(args).current_dir(dir).env("LEFFA_THREADS", "1").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        let name = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
        if p.is_dir() {
            out.extend(tree(&p).into_iter().map(|(n, b)| (format!("{name}/{n}"), b)));
        } else {
            out.push((name, fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

fn tiny_dir() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("cfg.json"), TINY).unwrap();
    tmp
}

#[test]
fn gen_data_writes_count_manifest_lines() {
    let tmp = tiny_dir();
    let o = leffa(&["gen-data", "--config", "cfg.json", "--out", "d"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest = fs::read_to_string(tmp.path().join("d/16x16/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 4);
}

#[test]
fn gen_data_is_byte_identical_for_one_seed() {
    let tmp = tiny_dir();
    for out in ["a", "b"] {
        assert_eq!(code(&leffa(&["gen-data", "--config", "cfg.json", "--out", out], tmp.path())), 0);
    }
    let (a, b) = (tree(&tmp.path().join("a")), tree(&tmp.path().join("b")));
    assert!(!a.is_empty());
    assert_eq!(a, b);
    assert_eq!(code(&leffa(&["gen-data", "--config", "cfg.json", "--out", "c", "--seed", "9"], tmp.path())), 0);
    assert_ne!(tree(&tmp.path().join("c")), a);
}

#[test]
fn invalid_task_kind_exits_two_naming_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.json"), r#"{"data": {"task_kind": "bogus"}}"#).unwrap();
    let o = leffa(&["gen-data", "--config", "bad.json", "--out", "d"], tmp.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("data.task_kind"), "{}", stderr(&o));
}

#[test]
fn empty_stage_plan_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("e.json"), r#"{"stages": []}"#).unwrap();
    let o = leffa(&["train", "--config", "e.json", "--out", "r"], tmp.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("empty stage plan"), "{}", stderr(&o));
}

#[test]
fn violations_are_listed_together() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("v.json"), r#"{"stages": [], "data": {"count": 0}}"#).unwrap();
    let o = leffa(&["train", "--config", "v.json"], tmp.path());
    assert_eq!(code(&o), 2);
    let e = stderr(&o);
    assert!(e.contains("empty stage plan") && e.contains("data.count"), "{e}");
}

#[test]
fn gradcheck_passes_and_prints_a_table() {
    let tmp = tempfile::tempdir().unwrap();
    let o = leffa(&["gradcheck", "--seed", "3"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.starts_with("op"));
    assert!(out.contains("leffa_chain") && !out.contains("FAIL"), "{out}");
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_leffa"))
        .args(["gradcheck"])
        .current_dir(tmp.path())
        .env("LEFFA_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn train_eval_visualize_round_trip() {
    let tmp = tiny_dir();
    let dir = tmp.path();
    assert_eq!(code(&leffa(&["gen-data", "--config", "cfg.json", "--out", "d"], dir)), 0);
    let o = leffa(&["train", "--config", "cfg.json", "--data", "d", "--out", "r"], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["config.json", "metrics.csv", "checkpoint.lft", "eval.json"] {
        assert!(dir.join("r").join(f).is_file(), "missing {f}");
    }
    let metrics = fs::read_to_string(dir.join("r/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    // the resolved config reproduces the run
    let o = leffa(&["train", "--config", "r/config.json", "--data", "d", "--out", "r2"], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(dir.join("r/checkpoint.lft")).unwrap(), fs::read(dir.join("r2/checkpoint.lft")).unwrap());

    let o = leffa(&["eval", "--checkpoint", "r/checkpoint.lft"], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let saved: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("r/eval.json")).unwrap()).unwrap();
    assert_eq!(report, saved);

    let o = leffa(&["visualize", "--checkpoint", "r/checkpoint.lft", "--data", "d", "--sample", "1", "--out", "v"], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let files: Vec<String> = tree(&dir.join("v")).into_iter().map(|(n, _)| n).collect();
    assert!(files.iter().any(|f| f.ends_with("_attention.pgm")), "{files:?}");
    assert!(files.iter().any(|f| f.ends_with("_flow.ppm")));
    assert!(files.iter().any(|f| f.ends_with("_warped.ppm")));

    let o = leffa(&["visualize", "--checkpoint", "r/checkpoint.lft", "--out", "v", "--query", "99,0"], dir);
    assert_eq!(code(&o), 2);
}

#[test]
fn mismatched_checkpoint_is_a_config_error() {
    let tmp = tiny_dir();
    let dir = tmp.path();
    assert_eq!(code(&leffa(&["train", "--config", "cfg.json", "--out", "r"], dir)), 0);
    let wider = TINY.replace(r#""width": 8"#, r#""width": 12"#);
    fs::write(dir.join("wide.json"), wider).unwrap();
    let o = leffa(&["eval", "--checkpoint", "r/checkpoint.lft", "--config", "wide.json"], dir);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("checkpoint does not match"), "{}", stderr(&o));
}

#[test]
fn ablate_writes_a_table() {
    let tmp = tiny_dir();
    let o = leffa(&["ablate", "--config", "cfg.json", "--out", "a", "--axis", "lambda", "--values", "0,1e-3", "--seeds", "0,1"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(tmp.path().join("a/ablation.csv")).unwrap();
    assert!(csv.starts_with("axis,value,seed,mean_epe,warp_psnr"));
    assert_eq!(csv.lines().filter(|l| l.contains(",mean,")).count(), 2);
    let o = leffa(&["ablate", "--config", "cfg.json", "--out", "a", "--axis", "nope", "--values", "1"], tmp.path());
    assert_eq!(code(&o), 2);
}
