use std::path::Path;
use std::process::{Command, Output};

fn lst(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lst"))
        .args(args)
        .env("LST_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

const TINY: &str = r#"
seeds = [1]
mode = "list"
[train]
sessions = 1
student_steps = 6
warmup_steps = 3
fn_epochs = 5
labeled_ft_epochs = 2
[few_shot]
n_splits = 1
"#;

#[test]
fn gen_data_writes_corpus_vocab_and_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    std::fs::write(&spec, "[task]\nrho = 0.2\n").unwrap();
    let out = lst(&["gen-data", "--spec", spec.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let data = dir.path().join("data");
    for f in ["corpus.tsv", "vocab.txt", "manifest-split1.tsv", "manifest-split5.tsv"] {
        assert!(data.join(f).is_file(), "{f}");
    }
    let corpus = lst_core::cli::load_corpus(&data).unwrap();
    assert_eq!(corpus.records.len(), 2530);

    let again = dir.path().join("again");
    let out = lst(
        &["split", "--data", data.to_str().unwrap(), "--out", again.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(
        std::fs::read(data.join("manifest-split3.tsv")).unwrap(),
        std::fs::read(again.join("manifest-split3.tsv")).unwrap()
    );
}

#[test]
fn train_eval_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let out = lst(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("runs/list/k10/split1-seed1");
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let lines = lst_core::cli::report::parse_metrics(&metrics).unwrap();
    assert_eq!(lines.len(), 2);

    let out = lst(
        &["eval", "--config", cfg.to_str().unwrap(), "--checkpoint", run.join("adapter.ckpt").to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["accuracy"].as_f64().unwrap(), lines[1].record.eval_accuracy);

    let runs = dir.path().join("runs");
    let out = lst(&["report", "--runs", runs.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("list"));
}

#[test]
fn bad_inputs_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.toml");
    assert_eq!(lst(&["train", "--config", missing.to_str().unwrap()], dir.path()).status.code(), Some(2));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nwarmup_steps = 999\nstudent_steps = 10\n").unwrap();
    assert_eq!(lst(&["train", "--config", bad.to_str().unwrap()], dir.path()).status.code(), Some(2));

    std::fs::write(&bad, "mode = \"nope\"\n").unwrap();
    assert_eq!(lst(&["train", "--config", bad.to_str().unwrap()], dir.path()).status.code(), Some(2));

    let ckpt = dir.path().join("x.ckpt");
    std::fs::write(&ckpt, b"not a checkpoint").unwrap();
    let good = dir.path().join("good.toml");
    std::fs::write(&good, TINY).unwrap();
    let out = lst(
        &["eval", "--config", good.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));

    assert_eq!(lst(&["storage-report", "--tasks", "0"], dir.path()).status.code(), Some(2));
    assert_eq!(lst(&["no-such-command"], dir.path()).status.code(), Some(2));
}

#[test]
fn storage_report_prints_illustration() {
    let dir = tempfile::tempdir().unwrap();
    let out = lst(
        &["storage-report", "--model-params", "355000000", "--tunable-params", "14000000", "--tasks", "100"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let s = String::from_utf8_lossy(&out.stdout);
    assert!(s.contains("ratio 20.23x"), "{s}");
}
