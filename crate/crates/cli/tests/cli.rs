use std::fs;
use std::path::Path;
use std::process::Command;

const TINY: &str = "seeds = [3]

[model]
conv1 = 4
conv2 = 6
embed = 12
predictor_hidden = 8

[optim]
batch_size = 10

[stage1]
epochs = 2
decay_epoch = 1
pretrain_epochs = 2

[stage2]
epochs = 2
decay_epoch = 1
";

fn comen(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_comen"))
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "comen {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_train_evaluate_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (data, cfg) = (d.join("bench.bin"), d.join("tiny.toml"));
    fs::write(&cfg, TINY).unwrap();
    let generate = [
        "generate",
        "--seed",
        "5",
        "--domains",
        "3",
        "--classes",
        "3",
        "--per-cell",
        "6",
        "--size",
        "8",
        "--out",
        s(&data),
    ];
    assert!(comen(&generate).contains("54 samples"));

    let fold = ["--data", s(&data), "--config", s(&cfg), "--held-out", "2"];
    let (ck1, assign, ck2, curves) = (
        d.join("s1.ck"),
        d.join("p.txt"),
        d.join("s2.ck"),
        d.join("curves"),
    );
    let mut stage1 = vec!["train-stage1"];
    stage1.extend(fold);
    stage1.extend([
        "--out-checkpoint",
        s(&ck1),
        "--out-assignments",
        s(&assign),
        "--out-dir",
        s(&curves),
    ]);
    assert!(comen(&stage1).contains("stage 1"));
    assert!(curves.join("stage1_entropy.csv").exists());

    let mut stage2 = vec!["train-stage2"];
    stage2.extend(fold);
    stage2.extend([
        "--checkpoint",
        s(&ck1),
        "--assignments",
        s(&assign),
        "--out-checkpoint",
        s(&ck2),
    ]);
    assert!(comen(&stage2).contains("best validation accuracy"));

    let eval_dir = d.join("eval");
    let mut evaluate = vec!["evaluate"];
    evaluate.extend(fold);
    evaluate.extend(["--checkpoint", s(&ck2), "--out-dir", s(&eval_dir)]);
    assert!(comen(&evaluate).contains("held-out domain 2"));
    assert!(eval_dir.join("confusion_fold2.csv").exists());

    let summary = comen(&["report", "--metrics", s(&eval_dir.join("metrics.jsonl"))]);
    assert!(summary.contains("sdnorm+protogr+protoccl"), "{summary}");
}

#[test]
fn stage_one_checkpoint_is_tied_to_its_fold() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (data, cfg) = (d.join("bench.bin"), d.join("tiny.toml"));
    fs::write(&cfg, TINY).unwrap();
    comen(&[
        "generate",
        "--domains",
        "3",
        "--classes",
        "2",
        "--per-cell",
        "5",
        "--size",
        "8",
        "--out",
        s(&data),
    ]);
    let (ck, assign) = (d.join("s1.ck"), d.join("p.txt"));
    comen(&[
        "train-stage1",
        "--data",
        s(&data),
        "--config",
        s(&cfg),
        "--held-out",
        "0",
        "--out-checkpoint",
        s(&ck),
        "--out-assignments",
        s(&assign),
    ]);
    let out = Command::new(env!("CARGO_BIN_EXE_comen"))
        .args([
            "train-stage2",
            "--data",
            s(&data),
            "--config",
            s(&cfg),
            "--held-out",
            "1",
        ])
        .args([
            "--checkpoint",
            s(&ck),
            "--assignments",
            s(&assign),
            "--out-checkpoint",
            s(&d.join("s2.ck")),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("held_out=0"));
}

#[test]
fn ablation_writes_table_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (data, cfg, out) = (d.join("bench.bin"), d.join("tiny.toml"), d.join("abl"));
    fs::write(&cfg, TINY).unwrap();
    comen(&[
        "generate",
        "--domains",
        "3",
        "--classes",
        "2",
        "--per-cell",
        "5",
        "--size",
        "8",
        "--out",
        s(&data),
    ]);
    let table = comen(&[
        "ablate",
        "--data",
        s(&data),
        "--config",
        s(&cfg),
        "--rows",
        "deepall,sdnorm",
        "--out-dir",
        s(&out),
    ]);
    assert!(table.contains("| SDNorm |"));
    assert!(out.join("ablation.md").exists());
    let lines = fs::read_to_string(out.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(lines, 2 * 3);
}
