//! End-to-end CLI behavior: exit codes, file outputs, report shapes.

use seqfn_core::arch::{build_model, ArchSpec};
use seqfn_core::checkpoint::{save_checkpoint, Checkpoint, CheckpointMeta};
use seqfn_core::cnn::CnnSpec;
use seqfn_core::model::{HeadKind, ModelSpec, DEFAULT_SCAN};
use std::path::Path;
use std::process::{Command, Output};

fn seqfn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqfn"))
        .args(args)
        .current_dir(cwd)
        .env_remove("SEQFN_MODE")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

fn write(path: &Path, content: &str) {
    std::fs::write(path, content).unwrap();
}

fn tiny_task_checkpoint(head: HeadKind, dir: &Path, name: &str) -> std::path::PathBuf {
    let spec = ArchSpec::Mamba(ModelSpec {
        d_model: 8,
        n_layers: 1,
        d_state: 2,
        conv_kernel: 2,
        head,
        ..ModelSpec::default()
    });
    let mut model = build_model::<f64>(&spec, 11, DEFAULT_SCAN).unwrap();
    scatter_head(model.params_mut(), 11);
    let ckpt = Checkpoint {
        spec,
        params: model.params().clone(),
        optim: None,
        meta: CheckpointMeta::default(),
    };
    let path = dir.join(name);
    save_checkpoint(&path, &ckpt).unwrap();
    path
}

/// The readout initializes at zero; untrained fixture checkpoints need a
/// nonzero head so their predictions are not constant.
fn scatter_head(params: &mut seqfn_core::params::ParamSet<f64>, seed: u64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    if let Some(t) = params.get_mut("head_w") {
        for v in t.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
}

fn tiny_cnn_checkpoint(dir: &Path, name: &str) -> std::path::PathBuf {
    let spec = ArchSpec::Cnn(CnnSpec {
        embed_dim: 4,
        filters: vec![3, 4],
        kernels: vec![2, 3],
        head: HeadKind::Regression,
        ..CnnSpec::default()
    });
    let mut model = build_model::<f64>(&spec, 12, DEFAULT_SCAN).unwrap();
    scatter_head(model.params_mut(), 12);
    let ckpt = Checkpoint {
        spec,
        params: model.params().clone(),
        optim: None,
        meta: CheckpointMeta::default(),
    };
    let path = dir.join(name);
    save_checkpoint(&path, &ckpt).unwrap();
    path
}

const TASK_CSV: &str = "sequence,label,split\n\
GAVLMK,0.5,train\nAAGVKM,0.1,train\nMKGAVL,0.9,train\nGGAAVV,0.4,train\n\
AVGKML,0.3,valid\nKMGAVL,0.7,valid\nGAKMLV,0.2,valid\n\
MKVGLA,0.6,test\nAAGGMM,0.8,test\nGAVKLM,0.15,test\nVVKKAA,0.55,test\nAMGKLV,0.35,test\n";

#[test]
fn ingest_single_chain_filter_and_idempotence() {
    let dir = tempfile::tempdir().unwrap();
    let pdbs = dir.path().join("pdbs");
    std::fs::create_dir(&pdbs).unwrap();
    write(
        &pdbs.join("one.pdb"),
        "SEQRES   1 A    3  GLY ALA VAL\nEND\n",
    );
    write(
        &pdbs.join("two.pdb"),
        "SEQRES   1 Q    2  LYS MET\nEND\n",
    );
    write(
        &pdbs.join("multi.pdb"),
        "SEQRES   1 A    2  GLY GLY\nSEQRES   1 B    2  ALA ALA\nEND\n",
    );
    let out = seqfn(
        &[
            "ingest",
            "--pdb-dir",
            "pdbs",
            "--out",
            "corpus.fasta",
            "--single-chain-only",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let corpus = std::fs::read_to_string(dir.path().join("corpus.fasta")).unwrap();
    assert_eq!(corpus.matches('>').count(), 2);
    assert!(corpus.contains(">one_A\nGAV\n"));
    assert!(corpus.contains(">two_Q\nKM\n"));
    assert!(stdout(&out).contains("sequences: 2"));

    // rerun writes identical bytes
    let out2 = seqfn(
        &[
            "ingest",
            "--pdb-dir",
            "pdbs",
            "--out",
            "corpus2.fasta",
            "--single-chain-only",
        ],
        dir.path(),
    );
    assert_eq!(code(&out2), 0);
    let corpus2 = std::fs::read_to_string(dir.path().join("corpus2.fasta")).unwrap();
    assert_eq!(corpus, corpus2);

    // without the filter, all three files contribute chains
    let out3 = seqfn(
        &["ingest", "--pdb-dir", "pdbs", "--out", "all.fasta"],
        dir.path(),
    );
    assert_eq!(code(&out3), 0);
    let all = std::fs::read_to_string(dir.path().join("all.fasta")).unwrap();
    assert_eq!(all.matches('>').count(), 4);
}

#[test]
fn ingest_requires_exactly_one_input_kind() {
    let dir = tempfile::tempdir().unwrap();
    let out = seqfn(&["ingest", "--out", "x.fasta"], dir.path());
    assert_eq!(code(&out), 64);
}

#[test]
fn ingest_zero_sequences_is_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let pdbs = dir.path().join("pdbs");
    std::fs::create_dir(&pdbs).unwrap();
    write(&pdbs.join("empty.pdb"), "HEADER ONLY\nEND\n");
    let out = seqfn(
        &["ingest", "--pdb-dir", "pdbs", "--out", "c.fasta"],
        dir.path(),
    );
    assert_eq!(code(&out), 65);
}

#[test]
fn pretrain_missing_corpus_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = seqfn(
        &["pretrain", "--corpus", "nope.fasta", "--out-dir", "run"],
        dir.path(),
    );
    assert_eq!(code(&out), 64, "stderr: {}", stderr(&out));
    let out2 = seqfn(&["pretrain", "--out-dir", "run"], dir.path());
    assert_eq!(code(&out2), 64);
}

#[test]
fn unknown_config_key_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path().join("cfg.json").as_path(), r#"{"d_modle": 8}"#);
    write(dir.path().join("c.fasta").as_path(), ">a\nGAV\n");
    let out = seqfn(
        &[
            "pretrain",
            "--config",
            "cfg.json",
            "--corpus",
            "c.fasta",
            "--out-dir",
            "run",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 64);
    assert!(stderr(&out).contains("d_modle"), "stderr: {}", stderr(&out));
}

#[test]
fn finetune_classification_rejects_non_binary_labels() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path().join("bad.csv").as_path(),
        "sequence,label,split\nGAV,1,train\nMKV,0.5,train\nAAV,0,valid\n",
    );
    let out = seqfn(
        &[
            "finetune",
            "--data",
            "bad.csv",
            "--task",
            "classification",
            "--out-dir",
            "run",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 65, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("line 3"), "stderr: {}", stderr(&out));
}

#[test]
fn finetune_bad_task_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path().join("d.csv").as_path(), TASK_CSV);
    let out = seqfn(
        &[
            "finetune",
            "--data",
            "d.csv",
            "--task",
            "ranking",
            "--out-dir",
            "run",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 64);
}

#[test]
fn finetune_from_scratch_writes_run_files() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path().join("d.csv").as_path(), TASK_CSV);
    write(
        dir.path().join("cfg.json").as_path(),
        r#"{"d_model": 8, "n_layers": 1, "d_state": 2, "conv_kernel": 2, "max_epochs": 2, "patience": 2, "max_tokens": 128}"#,
    );
    let out = seqfn(
        &[
            "finetune",
            "--config",
            "cfg.json",
            "--data",
            "d.csv",
            "--task",
            "regression",
            "--out-dir",
            "run",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    for f in ["config.json", "train_log.jsonl", "model.ckpt", "eval_valid.json"] {
        assert!(dir.path().join("run").join(f).exists(), "missing {f}");
    }
    let echoed = std::fs::read_to_string(dir.path().join("run/config.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&echoed).unwrap();
    assert_eq!(parsed["max_epochs"], 2);
    assert_eq!(parsed["arch"], "mamba");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/eval_valid.json")).unwrap())
            .unwrap();
    assert_eq!(report["metric"], "spearman");
    assert_eq!(report["n_examples"], 3);
}

#[test]
fn evaluate_routes_metric_by_head_and_counts_split() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path().join("d.csv").as_path(), TASK_CSV);
    let reg = tiny_task_checkpoint(HeadKind::Regression, dir.path(), "reg.ckpt");
    let out = seqfn(
        &[
            "evaluate",
            "--checkpoint",
            reg.to_str().unwrap(),
            "--data",
            "d.csv",
            "--split",
            "test",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["metric"], "spearman");
    assert_eq!(report["n_examples"], 5);
    assert!(report["splits"]["test"].is_object());

    // classification head routes to accuracy
    write(
        dir.path().join("dc.csv").as_path(),
        "sequence,label,split\nGAVLMK,1,train\nAAGVKM,0,valid\nMKGAVL,1,test\nGGAAVV,0,test\n",
    );
    let clf = tiny_task_checkpoint(HeadKind::BinaryClassification, dir.path(), "clf.ckpt");
    let out = seqfn(
        &[
            "evaluate",
            "--checkpoint",
            clf.to_str().unwrap(),
            "--data",
            "dc.csv",
            "--split",
            "test",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["metric"], "accuracy");
    assert_eq!(report["n_examples"], 2);
}

#[test]
fn cross_arch_reports_differ_only_in_value_fields() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path().join("d.csv").as_path(), TASK_CSV);
    let mamba = tiny_task_checkpoint(HeadKind::Regression, dir.path(), "m.ckpt");
    let cnn = tiny_cnn_checkpoint(dir.path(), "c.ckpt");
    let run = |ckpt: &Path| -> serde_json::Value {
        let out = seqfn(
            &[
                "evaluate",
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--data",
                "d.csv",
                "--split",
                "test",
            ],
            dir.path(),
        );
        assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
        serde_json::from_str(&stdout(&out)).unwrap()
    };
    let a = run(&mamba);
    let b = run(&cnn);
    // identical structure and identical non-value fields
    assert_eq!(a["task"], b["task"]);
    assert_eq!(a["metric"], b["metric"]);
    assert_eq!(a["n_examples"], b["n_examples"]);
    let keys = |v: &serde_json::Value| -> Vec<String> {
        v.as_object().unwrap().keys().cloned().collect()
    };
    assert_eq!(keys(&a), keys(&b));
    assert_eq!(
        a["splits"]["test"]["n_examples"],
        b["splits"]["test"]["n_examples"]
    );
    assert_ne!(a["value"], b["value"]);
}

#[test]
fn evaluate_bad_split_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path().join("d.csv").as_path(), TASK_CSV);
    let ckpt = tiny_task_checkpoint(HeadKind::Regression, dir.path(), "r.ckpt");
    let out = seqfn(
        &[
            "evaluate",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            "d.csv",
            "--split",
            "dev",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 64);
}

#[test]
fn evaluate_lm_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path().join("d.csv").as_path(), TASK_CSV);
    let ckpt = tiny_task_checkpoint(HeadKind::Lm, dir.path(), "lm.ckpt");
    let out = seqfn(
        &[
            "evaluate",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            "d.csv",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 64);
}

#[test]
fn predict_emits_one_line_per_record() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path().join("in.fasta").as_path(),
        ">p1 some description\nGAVLMK\n>p2\nMMKK\n",
    );
    let reg = tiny_task_checkpoint(HeadKind::Regression, dir.path(), "r.ckpt");
    let out = seqfn(
        &[
            "predict",
            "--checkpoint",
            reg.to_str().unwrap(),
            "--fasta",
            "in.fasta",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let lines: Vec<String> = stdout(&out).lines().map(String::from).collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("p1\t"));
    assert!(lines[1].starts_with("p2\t"));

    // classification checkpoints emit probabilities
    let clf = tiny_task_checkpoint(HeadKind::BinaryClassification, dir.path(), "c.ckpt");
    let out = seqfn(
        &[
            "predict",
            "--checkpoint",
            clf.to_str().unwrap(),
            "--fasta",
            "in.fasta",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    for line in stdout(&out).lines() {
        let p: f64 = line.split('\t').nth(1).unwrap().parse().unwrap();
        assert!(p > 0.0 && p < 1.0, "not a probability: {p}");
    }
}

#[test]
fn predict_empty_fasta_is_empty_output_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path().join("empty.fasta").as_path(), "");
    let ckpt = tiny_task_checkpoint(HeadKind::Regression, dir.path(), "r.ckpt");
    let out = seqfn(
        &[
            "predict",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--fasta",
            "empty.fasta",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).is_empty());
}

#[test]
fn help_exits_zero_and_bad_flag_is_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = seqfn(&["--help"], dir.path());
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("pretrain"));
    let out = seqfn(&["pretrain", "--no-such-flag"], dir.path());
    assert_eq!(code(&out), 64);
}

#[test]
fn finetune_checkpoint_config_mismatch_names_field() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path().join("d.csv").as_path(), TASK_CSV);
    let ckpt = tiny_task_checkpoint(HeadKind::Regression, dir.path(), "r.ckpt"); // d_model 8
    write(
        dir.path().join("cfg.json").as_path(),
        r#"{"d_model": 16, "max_epochs": 1}"#,
    );
    let out = seqfn(
        &[
            "finetune",
            "--config",
            "cfg.json",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            "d.csv",
            "--task",
            "regression",
            "--out-dir",
            "run",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 64, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("d_model"), "stderr: {}", stderr(&out));
}

#[test]
fn fast_mode_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path().join("c.fasta").as_path(),
        ">a\nGAVLMKDE\n>b\nAAGGVVKK\n>c\nMKLPQRST\n",
    );
    write(
        dir.path().join("cfg.json").as_path(),
        r#"{"d_model": 8, "n_layers": 1, "d_state": 2, "conv_kernel": 2, "max_epochs": 2, "patience": 2, "max_tokens": 128}"#,
    );
    let out = Command::new(env!("CARGO_BIN_EXE_seqfn"))
        .args([
            "pretrain",
            "--config",
            "cfg.json",
            "--corpus",
            "c.fasta",
            "--out-dir",
            "run",
        ])
        .current_dir(dir.path())
        .env("SEQFN_MODE", "fast")
        .output()
        .expect("binary runs");
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let echoed = std::fs::read_to_string(dir.path().join("run/config.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&echoed).unwrap();
    assert_eq!(parsed["mode"], "fast");
    assert!(dir.path().join("run/model.ckpt").exists());

    let bad = Command::new(env!("CARGO_BIN_EXE_seqfn"))
        .args(["pretrain", "--corpus", "c.fasta", "--out-dir", "x"])
        .current_dir(dir.path())
        .env("SEQFN_MODE", "float16")
        .output()
        .expect("binary runs");
    assert_eq!(bad.status.code(), Some(64));
}

#[test]
fn echoed_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path().join("d.csv").as_path(), TASK_CSV);
    write(
        dir.path().join("cfg.json").as_path(),
        r#"{"d_model": 8, "n_layers": 1, "d_state": 2, "conv_kernel": 2, "max_epochs": 2, "patience": 2, "max_tokens": 128, "seed": 13}"#,
    );
    let out = seqfn(
        &[
            "finetune",
            "--config",
            "cfg.json",
            "--data",
            "d.csv",
            "--task",
            "regression",
            "--out-dir",
            "run_a",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    // rerun purely from the echoed config: no --data/--task/--seed flags
    let out = seqfn(
        &[
            "finetune",
            "--config",
            "run_a/config.json",
            "--out-dir",
            "run_b",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    for f in ["config.json", "train_log.jsonl", "model.ckpt", "eval_valid.json"] {
        let a = std::fs::read(dir.path().join("run_a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("run_b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs after config round trip");
    }
}

#[test]
fn seeds_flag_reports_mean_and_std() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path().join("d.csv").as_path(), TASK_CSV);
    write(
        dir.path().join("cfg.json").as_path(),
        r#"{"d_model": 8, "n_layers": 1, "d_state": 2, "conv_kernel": 2, "max_epochs": 1, "patience": 1, "max_tokens": 128}"#,
    );
    let out = seqfn(
        &[
            "finetune",
            "--config",
            "cfg.json",
            "--data",
            "d.csv",
            "--task",
            "regression",
            "--out-dir",
            "runs",
            "--seeds",
            "1,2",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(
        text.lines().any(|l| l.starts_with("spearman mean(std): ")),
        "stdout: {text}"
    );
    let summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("runs/summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(summary["values"].as_array().unwrap().len(), 2);
    assert!(dir.path().join("runs/seed_1/model.ckpt").exists());
    assert!(dir.path().join("runs/seed_2/model.ckpt").exists());
}
