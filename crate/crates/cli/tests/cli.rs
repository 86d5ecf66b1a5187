use std::path::Path;
use std::process::{Command, Output};

use evidentia::diffcore::gradcheck::catalogue;
use evidentia::fixture::{overlap_dataset, overlap_mc_dataset, write_with_vectors};
use evidentia::{Checkpoint, EncoderKind, Task};

fn evidentia(args: &[&str], data_root: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_evidentia"));
    cmd.args(args).env("RUST_LOG", "warn");
    match data_root {
        Some(root) => cmd.env("EVIDENTIA_DATA", root),
        None => cmd.env_remove("EVIDENTIA_DATA"),
    };
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Toy dataset under `dir/data` and a config at `dir/exp.json`.
fn toy(dir: &Path, task: Task, extra: &str) -> String {
    let data = if task == Task::Argus {
        overlap_dataset([12, 6, 6], 1)
    } else {
        overlap_mc_dataset(task, [4, 2, 4], 1)
    };
    write_with_vectors(&dir.join("data"), &data, 6).unwrap();
    let cfg = format!(
        r#"{{
  "name": "toy",
  "task": "{}",
  "data_dir": "data",
  "vectors": "data/vectors.txt",
  "model": {{"dim": 6, "adaptable_k": 5, "encoder": {{"kind": "avg", "hidden": 4}}}},
  "train": {{"epochs": 3, "batch_size": 4, "lr": 0.01}},
  "runs": 2{extra}
}}"#,
        task.name()
    );
    let path = dir.join("exp.json");
    std::fs::write(&path, cfg).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gradcheck_passes_and_lists_everything_once() {
    let o = evidentia(&["gradcheck"], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    for kind in catalogue() {
        let hits = out
            .lines()
            .filter(|l| l.split_whitespace().nth(1) == Some(kind.name()) && l.starts_with("op"))
            .count();
        assert_eq!(hits, 1, "{kind}\n{out}");
    }
    for kind in EncoderKind::ALL {
        assert!(
            out.lines().any(|l| l.starts_with("encoder") && l.split_whitespace().nth(1) == Some(kind.name())),
            "{kind}"
        );
    }
}

#[test]
fn injected_fault_fails_gradcheck() {
    let o = evidentia(&["gradcheck", "--inject-fault", "sigmoid"], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("FAIL"));
    assert!(stderr(&o).contains("sigmoid"));
    let o = evidentia(&["gradcheck", "--inject-fault", "nonsense"], None);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(evidentia(&["frobnicate"], None).status.code(), Some(1));
    assert_eq!(evidentia(&["train"], None).status.code(), Some(1));
    assert_eq!(evidentia(&["--help"], None).status.code(), Some(0));
}

#[test]
fn missing_paths_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.json");
    std::fs::write(&cfg, r#"{"task": "argus", "train": {"lr": -1}}"#).unwrap();
    let o = evidentia(&["train", "--config", cfg.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("data_dir"), "{err}");
    assert!(err.contains("vectors"), "{err}");
    assert!(err.contains("train.lr"), "{err}");

    std::fs::write(&cfg, r#"{"task": "argus", "data_dir": "nowhere", "vectors": "v.txt"}"#).unwrap();
    let o = evidentia(&["train", "--config", cfg.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("data_dir: missing"), "{}", stderr(&o));
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy(dir.path(), Task::Argus, "");
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let o = evidentia(&["train", "--config", &cfg, "--out", out.to_str().unwrap()], None);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for file in ["checkpoint.json", "train_log.csv"] {
        let a = std::fs::read(out_a.join(file)).unwrap();
        assert_eq!(a, std::fs::read(out_b.join(file)).unwrap(), "{file}");
    }
    // Rerunning into the same directory rewrites identical bytes.
    let before = std::fs::read(out_a.join("checkpoint.json")).unwrap();
    let o = evidentia(&["train", "--config", &cfg, "--out", out_a.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read(out_a.join("checkpoint.json")).unwrap(), before);

    let materialized = std::fs::read_to_string(out_a.join("config.json")).unwrap();
    assert!(materialized.contains("\"beta2\": 0.999"), "{materialized}");
    let ck = Checkpoint::load(&out_a.join("checkpoint.json")).unwrap();
    ck.to_model().unwrap();

    let log = std::fs::read_to_string(out_a.join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,train_loss,train_acc,val_acc\n"));
    let kept = log
        .lines()
        .skip(1)
        .find(|l| l.starts_with(&format!("{},", ck.metadata.epoch)))
        .unwrap();
    let logged_train: f64 = kept.split(',').nth(2).unwrap().parse().unwrap();

    let eval_dir = dir.path().join("eval");
    let o = evidentia(
        &[
            "eval",
            "--checkpoint",
            out_a.join("checkpoint.json").to_str().unwrap(),
            "--data",
            dir.path().join("data").to_str().unwrap(),
            "--split",
            "train",
            "--out",
            eval_dir.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = std::fs::read_to_string(eval_dir.join("eval.csv")).unwrap();
    let mut lines = report.lines();
    assert_eq!(lines.next(), Some("model,dataset,split,class,mean,ci95,n"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&row[..4], ["avg/weighed", "argus", "train", "all"]);
    assert_eq!(row[4].parse::<f64>().unwrap(), logged_train);
    assert!(std::fs::read_to_string(eval_dir.join("diagnostics.csv"))
        .unwrap()
        .starts_with("qid,evidence,c,r,bm25\n"));
}

#[test]
fn eval_without_checkpoint_fails() {
    let o = evidentia(&["eval", "--checkpoint", "/nonexistent/ck.json", "--data", "."], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("ck.json"));
}

#[test]
fn data_root_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let data = overlap_dataset([6, 4, 4], 2);
    write_with_vectors(&dir.path().join("argus"), &data, 50).unwrap();
    std::fs::rename(dir.path().join("argus/vectors.txt"), dir.path().join("glove.6B.50d.txt")).unwrap();
    let cfg = dir.path().join("exp.json");
    std::fs::write(
        &cfg,
        r#"{"task": "argus", "model": {"adaptable_k": 3, "encoder": {"kind": "avg", "hidden": 3}}, "train": {"epochs": 1}}"#,
    )
    .unwrap();
    let o = evidentia(&["train", "--config", cfg.to_str().unwrap()], Some(dir.path()));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("out/checkpoint.json").is_file());
}

#[test]
fn benchmark_smoke_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy(dir.path(), Task::Argus, "");
    let run = |out: &str, jobs: &str| {
        let out = dir.path().join(out);
        let o = evidentia(
            &["benchmark", "--config", &cfg, "--jobs", jobs, "--seed", "5", "--out", out.to_str().unwrap()],
            None,
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(stdout(&o).contains('±'), "{}", stdout(&o));
        std::fs::read_to_string(out.join("results.csv")).unwrap()
    };
    let a = run("a", "1");
    let b = run("b", "2");
    assert_eq!(a, b);
    let mut lines = a.lines();
    assert_eq!(lines.next(), Some("model,dataset,split,class,mean,ci95,n"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[3], "all");
    assert_eq!(row[6], "2");
    assert!(!row[5].is_empty());
}

#[test]
fn benchmark_breaks_mctest_down_by_class() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy(dir.path(), Task::Mctest, "");
    let out = dir.path().join("out");
    let o = evidentia(&["benchmark", "--config", &cfg, "--out", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("results.csv")).unwrap();
    let classes: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').nth(3).unwrap()).collect();
    assert_eq!(classes, ["all", "multi", "one"]);
}

#[test]
fn benchmark_rejects_a_single_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy(dir.path(), Task::Argus, "");
    let o = evidentia(&["benchmark", "--config", &cfg, "--runs", "1"], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("runs"));
}
