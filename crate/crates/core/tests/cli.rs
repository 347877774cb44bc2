use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use compressnet::arch::{builtin, count_parameters};
use compressnet::config::RunConfig;
use compressnet::reinforce::{EvaluationRecord, RunDirectory};
use compressnet::report::{sig4, TeacherRecord};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_compressnet"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = bin().current_dir(dir).args(args).output().expect("binary runs");
    if std::env::var_os("CLI_TEST_VERBOSE").is_some() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const CONFIG: &str = r#"
seed = 3
run_dir = "runs/main"

[teacher]
arch = "desk"
weights = "teacher/model_weights"

[teacher.training]
epochs = 5
learning_rate = 0.01
batch_size = 32
augment = false

[data]
root = "data"
subset = "pair"
base = "cifar10"
classes = ["airplane", "automobile"]
train_per_class = 40
test_per_class = 20

[search]
iterations = 2
students_per_iteration = 2

[distill]
epochs = 1
learning_rate = 0.005
batch_size = 32

[latency]
warmup = 1
samples = 5

[prune]
rounds = 1
filters_per_round = 8
finetune_epochs = 1
ranking_examples = 16
"#;

/// Workspace with synthetic data, a config and a trained teacher.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    ok(dir.path(), &["synth-data", "--root", "data", "--train-per-class", "40", "--test-per-class", "20", "--seed", "1"]);
    ok(dir.path(), &["train-teacher", "--config", "run.toml"]);
    dir
}

fn listing(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p.clone());
            }
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    fs::write(dir.path().join("bad.toml"), format!("{CONFIG}\n[policy]\nbogus = 1\n")).unwrap();

    assert_eq!(run(dir.path(), &["compress"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["validate-config", "--config", "bad.toml"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["validate-config", "--config", "absent.toml"]).status.code(), Some(2));
    let out = run(dir.path(), &["transfer", "--config", "run.toml", "--from", "nowhere/final"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));

    // Missing teacher weights are a runtime failure.
    assert_eq!(run(dir.path(), &["compress", "--config", "run.toml"]).status.code(), Some(1));
}

#[test]
fn validate_config_prints_materialized_defaults() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    let text = ok(dir.path(), &["validate-config", "--config", "run.toml"]);
    let cfg = RunConfig::from_toml(&text, "stdout").unwrap();
    assert_eq!(cfg.policy.head_bias_init, 2.0);
    assert_eq!(cfg.reward.a_th, 0.9);
    assert_eq!(cfg.to_toml(), text);
}

#[test]
fn shipped_configs_validate() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let configs: Vec<_> = fs::read_dir(root.join("configs"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "toml"))
        .collect();
    assert!(configs.len() >= 4);
    for c in configs {
        ok(&root, &["validate-config", "--config", c.to_str().unwrap()]);
    }
}

#[test]
fn dry_runs_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    let before = listing(dir.path());
    ok(dir.path(), &["synth-data", "--root", "data", "--dry-run"]);
    ok(dir.path(), &["train-teacher", "--config", "run.toml", "--dry-run"]);
    ok(dir.path(), &["compress", "--config", "run.toml", "--dry-run"]);
    ok(dir.path(), &["prune-baseline", "--config", "run.toml", "--dry-run"]);
    ok(dir.path(), &["report", "runs/main", "--output", "table.csv", "--dry-run"]);
    assert_eq!(listing(dir.path()), before);
}

#[test]
fn end_to_end_pipeline() {
    let dir = workspace();
    let root = dir.path();

    let teacher = TeacherRecord::load(&root.join("teacher/teacher_reference.json")).unwrap();
    assert!(teacher.reference.accuracy > 0.5, "teacher accuracy {}", teacher.reference.accuracy);
    assert_eq!(teacher.reference.parameters, count_parameters(&builtin::desk(2)).unwrap() as u64);

    // A second teacher with the same seed reproduces accuracy and size.
    let again = root.join("again.toml");
    fs::write(&again, CONFIG.replace("teacher/model_weights", "teacher2/model_weights")).unwrap();
    ok(root, &["train-teacher", "--config", "again.toml"]);
    let twin = TeacherRecord::load(&root.join("teacher2/teacher_reference.json")).unwrap();
    assert_eq!(twin.reference.accuracy, teacher.reference.accuracy);
    assert_eq!(twin.reference.parameters, teacher.reference.parameters);
    assert_eq!(fs::read(root.join("teacher/model_weights")).unwrap(), fs::read(root.join("teacher2/model_weights")).unwrap());

    ok(root, &["compress", "--config", "run.toml", "--mode", "hard_only"]);
    let run_dir = root.join("runs/main");
    assert_eq!(RunDirectory::read_iterations(&run_dir).unwrap().len(), 2);
    let snapshot = fs::read_to_string(run_dir.join("config.snapshot")).unwrap();
    let parsed = RunConfig::from_toml(&snapshot, "snapshot").unwrap();
    assert_eq!(parsed.to_toml(), snapshot);
    assert_eq!(parsed.distill.mode, compressnet::distill::DistillMode::HardOnly);
    assert!(run_dir.join("checkpoints/final").exists());
    assert!(run_dir.join("best/record.json").exists());

    ok(root, &["compress", "--config", "run.toml", "--iterations", "0", "--run-dir", "runs/empty"]);
    assert!(RunDirectory::read_iterations(&root.join("runs/empty")).unwrap().is_empty());

    ok(root, &["transfer", "--config", "run.toml", "--from", "runs/main/checkpoints/final", "--run-dir", "runs/transfer", "--students", "1"]);
    let logs = RunDirectory::read_iterations(&root.join("runs/transfer")).unwrap();
    assert_eq!(logs.len(), 20);
    assert_eq!(logs[0].iteration, 2);

    ok(root, &["prune-baseline", "--config", "run.toml", "--run-dir", "runs/prune"]);
    assert_eq!(fs::read_to_string(root.join("runs/prune/prune/rounds.jsonl")).unwrap().lines().count(), 2);

    let csv = ok(root, &["report", "runs/main", "runs/prune", "runs/missing", "--format", "csv", "--output", "table.csv"]);
    assert_eq!(fs::read_to_string(root.join("table.csv")).unwrap(), csv);
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0][..2], ["Teacher", sig4(teacher_accuracy(&run_dir)).as_str()]);
    assert_eq!(rows[3][..2], ["missing", "incomplete"]);

    let reference = TeacherRecord::load(&run_dir.join("teacher_reference.json")).unwrap().reference;
    let best: EvaluationRecord =
        serde_json::from_str(&fs::read_to_string(run_dir.join("best/record.json")).unwrap()).unwrap();
    assert_eq!(rows[1][0], "main");
    assert_eq!(rows[1][3], best.parameters.to_string());
    assert_eq!(rows[1][4], sig4(reference.parameters as f64 / best.parameters as f64));
    assert_eq!(rows[1][6], sig4(reference.latency / best.latency));
    assert_eq!(rows[1][2], sig4(reference.accuracy - best.accuracy));

    let text = ok(root, &["report", "runs/main"]);
    assert!(text.lines().next().unwrap().starts_with("method"));

    fs::write(root.join("kd.json"), builtin::kd7(2).to_json()).unwrap();
    ok(root, &["train-student", "--config", "run.toml", "--arch", "kd.json", "--run-dir", "runs/kd"]);
    assert!(root.join("runs/kd/best/record.json").exists());
}

fn teacher_accuracy(run_dir: &Path) -> f64 {
    TeacherRecord::load(&run_dir.join("teacher_reference.json")).unwrap().reference.accuracy
}
