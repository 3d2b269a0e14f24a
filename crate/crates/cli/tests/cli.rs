use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn genshield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_genshield"))
        .args(args)
        .env_remove("GENSHIELD_MICRO_THREADS")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen_small(out: &Path, seed: &str) -> Output {
    genshield(&[
        "gen-data",
        "--out",
        path(out),
        "--n-train",
        "12",
        "--n-test",
        "6",
        "--seed",
        seed,
    ])
}

const DATA_FILES: [&str; 7] = [
    "train_detect.jsonl",
    "train_correct.jsonl",
    "test_detect.jsonl",
    "test_correct.jsonl",
    "manifest.json",
    "vocab.json",
    "resolved_config.json",
];

#[test]
fn gen_data_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    assert!(gen_small(&a, "5").status.success());
    assert!(gen_small(&b, "5").status.success());
    assert!(gen_small(&c, "6").status.success());
    for f in DATA_FILES {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(
        fs::read(a.join("test_detect.jsonl")).unwrap(),
        fs::read(c.join("test_detect.jsonl")).unwrap()
    );
}

#[test]
fn stage_two_without_checkpoint_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(gen_small(&data, "1").status.success());
    let out = genshield(&[
        "train",
        "--stage",
        "2",
        "--data",
        path(&data),
        "--out",
        path(&tmp.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.starts_with("ERROR: missing_prerequisite: "), "{err}");
    assert!(err.contains("stage-1 checkpoint"), "{err}");
    assert_eq!(err.lines().count(), 1);
}

#[test]
fn usage_and_config_errors_exit_one() {
    let out = genshield(&["train", "--stage", "3", "--data", "x", "--out", "y"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("ERROR: usage: "));

    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"training": {"learning_rate": 1.0}}"#).unwrap();
    let out = genshield(&["gen-data", "--out", path(&tmp.path().join("d")), "--config", path(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(
        err.starts_with("ERROR: config: ") && err.contains("learning_rate"),
        "{err}"
    );
}

#[test]
fn bad_checkpoint_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("junk.gshd");
    fs::write(&ckpt, b"not a checkpoint").unwrap();
    let img = tmp.path().join("img.json");
    fs::write(&img, "[[[0.0]]]").unwrap();
    let out = genshield(&["detect", "--ckpt", path(&ckpt), "--input", path(&img)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("ERROR: checkpoint: "));
}

fn train_tiny(data: &Path, out: &Path, stage: &str, threads: &str) -> Output {
    genshield(&[
        "train",
        "--stage",
        stage,
        "--data",
        path(data),
        "--out",
        path(out),
        "--total-steps",
        "4",
        "--batch-size",
        "2",
        "--d-model",
        "16",
        "--n-layers",
        "1",
        "--n-heads",
        "2",
        "--checkpoint-every",
        "2",
        "--threads",
        threads,
    ])
}

#[test]
fn pipeline_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(gen_small(&data, "3").status.success());
    let (r1, r2) = (tmp.path().join("r1"), tmp.path().join("r2"));
    for (dir, threads) in [(&r1, "1"), (&r2, "2")] {
        let o = train_tiny(&data, dir, "1", threads);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["stage1.gshd", "ckpt_step2.gshd", "train_log.csv"] {
        assert_eq!(fs::read(r1.join(f)).unwrap(), fs::read(r2.join(f)).unwrap(), "{f}");
    }
    let log = fs::read_to_string(r1.join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,task,loss_fm,loss_ar,loss,lr,grad_norm\n"));
    assert_eq!(log.lines().count(), 5);

    // stage 2 finds stage1.gshd in its output directory
    let o = train_tiny(&data, &r1, "2", "1");
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(r1.join("stage2.gshd").exists());

    // the echoed config reproduces the run
    let r3 = tmp.path().join("r3");
    let o = genshield(&[
        "train",
        "--stage",
        "1",
        "--data",
        path(&data),
        "--out",
        path(&r3),
        "--config",
        path(&r2.join("resolved_config.json")),
        "--threads",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(r1.join("stage1.gshd")).unwrap(),
        fs::read(r3.join("stage1.gshd")).unwrap()
    );

    let ckpt = r1.join("stage2.gshd");
    let reports: Vec<Vec<u8>> = ["e1", "e2"]
        .iter()
        .map(|name| {
            let report = tmp.path().join(name).join("report.csv");
            let o = genshield(&[
                "eval",
                "--ckpt",
                path(&ckpt),
                "--data",
                path(&data),
                "--robustness",
                "--report",
                path(&report),
                "--n-correct",
                "2",
                "--n-clean",
                "2",
                "--max-rounds",
                "2",
                "--flow-steps",
                "2",
            ]);
            assert!(o.status.success(), "{}", stderr(&o));
            fs::read(report).unwrap()
        })
        .collect();
    assert_eq!(reports[0], reports[1]);
    let csv = String::from_utf8(reports[0].clone()).unwrap();
    for p in ["none", "quantQ16", "quantQ8", "blur1.0", "blur2.0", "resize0.5"] {
        assert!(csv.contains(&format!("accuracy,{p},")), "{p}");
    }

    let o = genshield(&["detect", "--ckpt", path(&ckpt), "--data", path(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 6);

    let img = tmp.path().join("img.json");
    let first = fs::read_to_string(data.join("test_correct.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    fs::write(&img, rec["artifact_image"].to_string()).unwrap();
    let cdir = tmp.path().join("corr");
    let o = genshield(&[
        "correct",
        "--ckpt",
        path(&ckpt),
        "--input",
        path(&img),
        "--max-rounds",
        "2",
        "--flow-steps",
        "3",
        "--out",
        path(&cdir),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let traj: serde_json::Value = serde_json::from_slice(&fs::read(cdir.join("trajectory.json")).unwrap()).unwrap();
    let used = traj["rounds_used"].as_u64().unwrap();
    assert!((1..=2).contains(&used));
    assert!(cdir.join("round_1.ppm").exists() && cdir.join("resolved_config.json").exists());
}

#[test]
fn selftest_passes() {
    let o = genshield(&["selftest"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS ")).count(), 4);
}
