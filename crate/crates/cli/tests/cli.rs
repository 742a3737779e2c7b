//! Drives the `pmm-synth` binary end to end on a tiny phantom corpus.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const PHANTOM: &str = r#"
global_seed = 3

[[datasets]]
name = "alpha"
coverage = ["T1", "T2", "FLAIR"]
case_count = 3
holdout_cases = 1
slices_per_case = 2
image_size = 16
profile = { gain = 0.9, noise_sigma = 0.01 }

[[datasets]]
name = "beta"
coverage = ["T1", "T2", "T1C", "ADC"]
case_count = 3
holdout_cases = 1
slices_per_case = 2
image_size = 16
profile = { gamma = 1.2, noise_sigma = 0.01 }
"#;

const CONFIG: &str = r#"
[data]
registry = "phantom.toml"
corpus = "corpus"

[train]
epochs = 2
batch_size = 2
lr = 1e-3
lr_plateau_epochs = 1

[seeds]
global = 6

[model]
base_channels = 2
levels = 2
blocks_per_level = 1
d_id = 4
embed_hidden = 4
pfm_hidden = 4
disc_channels = 2
disc_stages = 2

[eval]
tasks = ["T1->T2", "T1,T2->T1C"]
montage_cases = 1

[ablation]
arms = ["full", "no-pfm"]
seeds = [1, 2]
"#;

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("phantom.toml"), PHANTOM).unwrap();
        fs::write(dir.path().join("train.toml"), CONFIG).unwrap();
        let ws = Workspace { dir };
        let out = ws.run(&["generate-phantom", "--spec", "phantom.toml", "--out", "corpus"]);
        assert_success(&out);
        ws
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_pmm-synth"))
            .current_dir(self.dir.path())
            .args(args)
            .output()
            .unwrap()
    }

    fn train(&self, out: &str) {
        assert_success(&self.run(&["train", "--config", "train.toml", "--out", out, "--quiet"]));
    }
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Exit code and the parsed JSON error record from stderr.
fn failure(out: &Output) -> (i32, serde_json::Value) {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap_or_default();
    let record: serde_json::Value =
        serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not a JSON record ({e}): {stderr}"));
    (out.status.code().unwrap(), record)
}

fn first_test_slice(corpus: &Path, dataset: &str) -> PathBuf {
    let mut cases: Vec<PathBuf> = fs::read_dir(corpus.join(dataset))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    cases.sort();
    let last_case = cases.last().unwrap();
    let mut slices: Vec<PathBuf> = fs::read_dir(last_case).unwrap().map(|e| e.unwrap().path()).collect();
    slices.sort();
    slices[0].clone()
}

#[test]
fn validate_corpus_reports_counts() {
    let ws = Workspace::new();
    let out = ws.run(&["validate-corpus", "--corpus", "corpus"]);
    assert_success(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("12 slices valid"), "{stdout}");
    assert!(stdout.contains("alpha"));
}

#[test]
fn train_writes_the_run_directory() {
    let ws = Workspace::new();
    ws.train("run");
    for f in ["invocation.json", "manifest.json", "losses.csv", "batch_plans.csv", "metrics.csv", "final.ckpt", "montage.png"] {
        assert!(ws.path("run").join(f).is_file(), "missing {f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "complete");
    assert_eq!(manifest["epochs"].as_array().unwrap().len(), 2);

    // refusing to clobber, then overwriting on request
    let (code, record) = failure(&ws.run(&["train", "--config", "train.toml", "--out", "run", "--quiet"]));
    assert_eq!(code, 2);
    assert_eq!(record["error"]["exit_code"], 2);
    assert_success(&ws.run(&["train", "--config", "train.toml", "--out", "run", "--quiet", "--overwrite"]));
}

#[test]
fn identical_invocations_give_identical_losses() {
    let ws = Workspace::new();
    ws.train("a");
    ws.train("b");
    let a = fs::read(ws.path("a/losses.csv")).unwrap();
    let b = fs::read(ws.path("b/losses.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn config_errors_name_the_field() {
    let ws = Workspace::new();
    let out = ws.run(&["train", "--config", "train.toml", "--out", "run", "--lr=-1"]);
    let (code, record) = failure(&out);
    assert_eq!(code, 2);
    assert_eq!(record["error"]["field"], "train.lr");
    assert!(!ws.path("run").exists(), "nothing is written for invalid input");
}

#[test]
fn usage_errors_follow_the_error_contract() {
    let ws = Workspace::new();
    let (code, record) = failure(&ws.run(&["train", "--config", "train.toml"]));
    assert_eq!(code, 2);
    assert_eq!(record["error"]["kind"], "usage");
    assert_success(&ws.run(&["--help"]));
}

#[test]
fn evaluate_is_repeatable_and_needs_tasks() {
    let ws = Workspace::new();
    ws.train("run");
    let eval = |out: &str| {
        ws.run(&[
            "evaluate", "--checkpoint", "run/final.ckpt", "--corpus", "corpus", "--task", "T1->T2", "--task",
            "T1,T2->FLAIR", "--out", out,
        ])
    };
    assert_success(&eval("e1"));
    assert_success(&eval("e2"));
    let a = fs::read(ws.path("e1/metrics.csv")).unwrap();
    assert_eq!(a, fs::read(ws.path("e2/metrics.csv")).unwrap());
    assert!(String::from_utf8_lossy(&a).contains("T1+T2→FLAIR,alpha"));

    let (code, record) = failure(&ws.run(&[
        "evaluate", "--checkpoint", "run/final.ckpt", "--corpus", "corpus", "--out", "e3",
    ]));
    assert_eq!(code, 2);
    assert_eq!(record["error"]["kind"], "empty_task");
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let ws = Workspace::new();
    let (code, _) = failure(&ws.run(&[
        "evaluate", "--checkpoint", "nope.ckpt", "--corpus", "corpus", "--task", "T1->T2", "--out", "e",
    ]));
    assert_eq!(code, 3);
}

#[test]
fn synthesize_writes_a_valid_slice() {
    let ws = Workspace::new();
    ws.train("run");
    let input = first_test_slice(&ws.path("corpus"), "beta");
    let input = input.to_str().unwrap();
    let out = ws.run(&[
        "synthesize", "--checkpoint", "run/final.ckpt", "--input", input, "--sources", "T1,T2", "--targets",
        "T1C,ADC", "--out", "syn", "--montage",
    ]);
    assert_success(&out);
    assert!(ws.path("syn/montage.png").is_file());
    let meta = fs::read_dir(ws.path("syn/beta"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let slice = fs::read_dir(meta).unwrap().next().unwrap().unwrap().path();
    let text = fs::read_to_string(slice.join("meta.json")).unwrap();
    let meta: serde_json::Value = serde_json::from_str(&text).unwrap();
    // bit order T1, T2, T1C, FLAIR, DWI, ADC
    assert_eq!(meta["availability"], "001001", "{text}");
}

#[test]
fn synthesize_rejects_bad_tasks() {
    let ws = Workspace::new();
    ws.train("run");
    let input = first_test_slice(&ws.path("corpus"), "alpha");
    let input = input.to_str().unwrap();
    let run = |sources: &str, targets: &str, out: &str| {
        ws.run(&[
            "synthesize", "--checkpoint", "run/final.ckpt", "--input", input, "--sources", sources, "--targets",
            targets, "--out", out,
        ])
    };
    let (code, record) = failure(&run("T1,T2", "T2", "x1"));
    assert_eq!((code, record["error"]["kind"].as_str()), (2, Some("invalid_task")));
    // alpha slices never carry ADC
    let (code, _) = failure(&run("ADC", "T1", "x2"));
    assert_eq!(code, 2);
    let (code, _) = failure(&run("T1", "DWI", "x3"));
    assert_eq!(code, 2);
}

#[test]
fn ablate_writes_a_report() {
    let ws = Workspace::new();
    let out = ws.run(&["ablate", "--config", "train.toml", "--out", "abl", "--epochs", "1", "--quiet"]);
    assert_success(&out);
    let csv = fs::read_to_string(ws.path("abl/ablation.csv")).unwrap();
    assert!(csv.starts_with("arm,seed,dataset,task,"));
    // 2 arms x 2 seeds x (T1->T2 on both datasets + T1,T2->T1C on beta)
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 3);
    assert!(ws.path("abl/full/seed1/manifest.json").is_file());
    assert!(ws.path("abl/summary.json").is_file());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("full >= no-pfm on every dataset in"), "{stdout}");
}
