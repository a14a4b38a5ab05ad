use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const TINY: &str = r#"
seed = 3

[model]
embed_dim = 8
num_heads = 2
mlp_ratio = 2
depth = 4

[family]
num_tasks = 3
num_classes = 3
tokens = 4
input_dim = 4
train_size = 24
test_size = 12

[held_out]
task_id = 4
test_size = 12

[corpus]
train_size = 32

[pretrain]
epochs = 1
batch_size = 8

[search]
epochs = 1
batch_size = 8
lr_multipliers = [1.0, 0.5, 0.1]

[extract]
tau = 0

[build]
target_depths = [4, 6]

[finetune]
epochs = 2
batch_size = 8
eval_every = 1

[compare]
depth = 5
seeds = [0]
"#;

const STAGES: [&str; 7] = ["synth-data", "pretrain-ans", "expand", "train-search", "extract", "build", "finetune"];

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_learngene"))
}

fn run(config: &Path, out: &Path, args: &[&str]) -> Output {
    bin()
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--output-dir")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn run_ok(config: &Path, out: &Path, args: &[&str]) -> String {
    let o = run(config, out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&o.stderr),
        String::from_utf8_lossy(&o.stdout)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

fn stderr_json(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {line}"))
}

/// sha256 of every artifact outside `logs/`, keyed by relative path.
fn digests(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().to_string();
            if path.is_dir() {
                if rel != "logs" {
                    stack.push(path);
                }
            } else {
                let d = Sha256::digest(fs::read(&path).unwrap());
                out.insert(rel, d.iter().map(|b| format!("{b:02x}")).collect());
            }
        }
    }
    out
}

#[test]
fn extract_without_search_artifacts_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    let o = run(&cfg, &out, &["extract"]);
    assert_eq!(o.status.code(), Some(4));
    let v = stderr_json(&o);
    assert_eq!(v["error"], "missing_artifact");
    assert!(v["path"].as_str().unwrap().ends_with("supernet.lgck"), "{v}");
    assert!(v["message"].as_str().unwrap().contains("supernet.lgck"));
}

#[test]
fn unknown_command_exits_2() {
    let o = bin().arg("fly").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "usage");
    let o = bin().output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_config_exits_3_with_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[pretrain]\nlr = -1.0\n[finetune]\nepochs = 2\nbatch_size = 0\n[model]\ncolour = 1\n");
    let o = run(&cfg, &dir.path().join("run"), &["synth-data"]);
    assert_eq!(o.status.code(), Some(3));
    let v = stderr_json(&o);
    let problems = v["problems"].as_array().unwrap();
    assert_eq!(problems.len(), 3, "{v}");
    assert!(!dir.path().join("run").exists(), "nothing runs on a bad config");
}

#[test]
fn negative_lr_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[search]\nlr = -0.5\n");
    let o = run(&cfg, &dir.path().join("run"), &["validate-config"]);
    assert_eq!(o.status.code(), Some(3));
    let v = stderr_json(&o);
    let problems = v["problems"].as_array().unwrap();
    assert_eq!(problems.len(), 1);
    let p = problems[0].as_str().unwrap();
    assert!(p.contains("search.lr") && p.contains("positive"), "{p}");
}

#[test]
fn tau_zero_validates_with_warning() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[extract]\ntau = 0\n");
    let o = run(&cfg, &dir.path().join("run"), &["validate-config"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning: extract.tau = 0"));
}

#[test]
fn shipped_config_validates() {
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let dir = tempfile::tempdir().unwrap();
    let o = run(&shipped, dir.path(), &["validate-config"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(o.stderr.is_empty());
}

#[test]
fn reference_storage_report() {
    let o = bin()
        .args(["report-storage", "--reference", "deit-b", "--depths", "5..15"])
        .output()
        .unwrap();
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.trim_end().ends_with("saving 95.41%"), "{text}");
    assert!(text.contains("787.03M"), "{text}");
    let rows: Vec<&str> = text.lines().filter(|l| l.trim_start().starts_with(|c: char| c.is_ascii_digit())).collect();
    assert_eq!(rows.len(), 11, "{text}");
    assert_eq!(rows.iter().filter(|l| l.ends_with("7.09M")).count(), 10, "{text}");
}

#[test]
fn pipeline_is_deterministic_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        for stage in STAGES {
            let stdout = run_ok(&cfg, out, &[stage]);
            assert!(stdout.contains("sha256="), "{stage}: {stdout}");
        }
    }
    let first = digests(&a);
    assert_eq!(first, digests(&b));
    for name in ["learngene.lgne", "paths_img.json", "desnet_d6.lgck", "finetuned_d4.lgck"] {
        assert!(first.contains_key(name), "{name} missing from {first:?}");
    }

    // Downstream stages rerun from persisted upstream artifacts reproduce the same bytes.
    for name in ["tally.json", "learngene.lgne", "plan_d4.json", "plan_d6.json", "desnet_d4.lgck", "desnet_d6.lgck"] {
        fs::remove_file(a.join(name)).unwrap();
    }
    fs::remove_file(a.join("finetuned_d4.lgck")).unwrap();
    fs::remove_file(a.join("finetuned_d6.lgck")).unwrap();
    for stage in ["extract", "build", "finetune"] {
        run_ok(&cfg, &a, &[stage]);
    }
    assert_eq!(digests(&a), first);

    let stdout = run_ok(&cfg, &a, &["eval"]);
    assert_eq!(stdout.lines().filter(|l| l.contains("accuracy")).count(), 2);
    let stdout = run_ok(&cfg, &a, &["report-overlap"]);
    assert!(stdout.contains("mean jaccard"));
    let stdout = run_ok(&cfg, &a, &["report-storage"]);
    assert!(stdout.contains("saving"));

    run_ok(&cfg, &a, &["compare"]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("compare.json")).unwrap()).unwrap();
    assert_eq!(report["depth"], 5);
    assert_eq!(report["seeds"][0]["learngene_curve"].as_array().unwrap().len(), 2);
    let csv = fs::read_to_string(a.join("compare_curves.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
}

#[test]
fn eval_single_model_on_named_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    let o = run(&cfg, &out, &["eval", "--model", "nowhere.lgck"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr_json(&o)["path"].as_str().unwrap().ends_with("nowhere.lgck"));
}
