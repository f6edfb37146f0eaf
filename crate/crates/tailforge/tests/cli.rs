//! End-to-end CLI coverage: every subcommand, the pinned file formats, and
//! the exit-code contract (0 success, 1 validation, 2 runtime).

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tailforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tailforge"))
        .args(args)
        .output()
        .expect("spawn tailforge")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        stdout_of(out),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_small_config(path: &Path) {
    fs::write(
        path,
        "epochs_phase1 = 6\nepochs_phase2 = 6\nhidden_dim = 16\nbatch_size = 16\nstrategy = full\nseed = 3\n",
    )
    .unwrap();
}

/// Build a small dataset directory usable by the pipeline commands.
fn make_dataset(root: &Path) -> std::path::PathBuf {
    let dist_dir = root.join("dist");
    let out = tailforge(&[
        "make-longtail",
        "8",
        "30",
        "2",
        "--alpha",
        "4",
        "--test-per-class",
        "4",
        "--out",
        dist_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let data_dir = root.join("data");
    let out = tailforge(&[
        "synth",
        "--dist",
        dist_dir.join("distribution.csv").to_str().unwrap(),
        "--dim",
        "6",
        "--class-sep",
        "3.0",
        "--test-per-class",
        "4",
        "--seed",
        "11",
        "--out",
        data_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    data_dir
}

#[test]
fn make_longtail_prints_reference_summary() {
    let out = tailforge(&["make-longtail", "101", "750", "5", "--alpha", "6"]);
    assert_code(&out, 0);
    let text = stdout_of(&out);
    assert!(text.contains("max=750"));
    assert!(text.contains("min=5"));
    assert!(text.contains("imbalance=150"));
    assert!(text.contains("head=28"));
    assert!(text.contains("tail=73"));
}

#[test]
fn make_longtail_rejects_bad_range_with_exit_1() {
    let out = tailforge(&["make-longtail", "10", "5", "5"]);
    assert_code(&out, 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid argument"));
}

#[test]
fn clap_usage_errors_exit_1() {
    let out = tailforge(&["make-longtail", "not-a-number", "5", "1"]);
    assert_code(&out, 1);
    let out = tailforge(&["no-such-subcommand"]);
    assert_code(&out, 1);
}

#[test]
fn help_exits_0() {
    let out = tailforge(&["--help"]);
    assert_code(&out, 0);
    assert!(stdout_of(&out).contains("tailforge"));
}

#[test]
fn make_longtail_with_frequency_table() {
    let dir = tempfile::tempdir().unwrap();
    let freq = dir.path().join("freq.csv");
    // head class keeps everything, the rest scale down
    fs::write(&freq, "class_id,frequency\n1,4.0\n2,2.0\n3,1.0\n4,0.0\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = tailforge(&[
        "make-longtail",
        "4",
        "100",
        "10",
        "--alpha",
        "2",
        "--freq",
        freq.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let csv = fs::read_to_string(out_dir.join("distribution.csv")).unwrap();
    assert!(csv.starts_with("class_id,count\n"));
    // zero frequency floors at one sample
    assert!(csv.lines().last().unwrap().ends_with(",1"));
}

#[test]
fn manifest_format_is_pinned() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(dir.path());
    let manifest = fs::read_to_string(data.join("manifest.csv")).unwrap();
    let mut lines = manifest.lines();
    assert_eq!(lines.next(), Some("sample_id,class_id,split,payload_path"));
    let first = lines.next().unwrap();
    let fields: Vec<&str> = first.split(',').collect();
    assert_eq!(fields.len(), 4);
    assert!(fields[2] == "train" || fields[2] == "test");
    assert!(fields[3].starts_with("payloads/"));
    assert!(fields[3].ends_with(".ltt1"));
    assert!(!manifest.contains('\r'));
    // payload files decode as LTT1
    let payload = data.join(fields[3]);
    let bytes = fs::read(payload).unwrap();
    assert_eq!(&bytes[0..4], b"LTT1");
}

#[test]
fn full_pipeline_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(dir.path());
    let cfg = dir.path().join("train.cfg");
    write_small_config(&cfg);

    // train
    let run_dir = dir.path().join("run");
    let out = tailforge(&[
        "train",
        "--manifest",
        data.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    assert!(stdout_of(&out).contains("strategy=full"));
    for artifact in ["teacher.ltt1", "student.ltt1", "embeddings.ltt1", "selection.csv", "log.csv"] {
        assert!(run_dir.join(artifact).exists(), "missing {artifact}");
    }
    let log = fs::read_to_string(run_dir.join("log.csv")).unwrap();
    assert!(log.starts_with("epoch,phase,loss_ce,loss_kd,lr\n"));
    assert_eq!(log.lines().count(), 1 + 6 + 6);
    let selection = fs::read_to_string(run_dir.join("selection.csv")).unwrap();
    assert!(selection.starts_with("class_id,sample_id,rank,kept\n"));

    // standalone select reproduces the same artifact shape
    let sel_path = dir.path().join("selection.csv");
    let out = tailforge(&[
        "select",
        "--manifest",
        data.to_str().unwrap(),
        "--embeddings",
        run_dir.join("embeddings.ltt1").to_str().unwrap(),
        "--out",
        sel_path.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let standalone = fs::read_to_string(&sel_path).unwrap();
    assert_eq!(standalone, selection);

    // augment: recipes + previews
    let aug_dir = dir.path().join("aug");
    let out = tailforge(&[
        "augment",
        "--manifest",
        data.to_str().unwrap(),
        "--selection",
        sel_path.to_str().unwrap(),
        "--embeddings",
        run_dir.join("embeddings.ltt1").to_str().unwrap(),
        "--k",
        "2",
        "--preview",
        "3",
        "--seed",
        "5",
        "--out",
        aug_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let recipes = fs::read_to_string(aug_dir.join("recipes.csv")).unwrap();
    assert!(recipes.starts_with("base_id,source_ids,mask_rects,label_weights\n"));
    assert!(recipes.lines().count() > 1);
    assert!(aug_dir.join("preview_0000.ltt1").exists());

    // eval the student bundle
    let eval_dir = dir.path().join("eval");
    let out = tailforge(&[
        "eval",
        "--manifest",
        data.to_str().unwrap(),
        "--model",
        run_dir.join("student.ltt1").to_str().unwrap(),
        "--strategy-label",
        "student",
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    assert!(stdout_of(&out).contains("strategy=student"));
    let results = fs::read_to_string(eval_dir.join("results.csv")).unwrap();
    assert!(results.starts_with("strategy,seed,head,tail,overall\n"));
}

#[test]
fn bench_is_byte_deterministic_and_report_merges() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(dir.path());
    let cfg = dir.path().join("train.cfg");
    write_small_config(&cfg);
    let run = |out_dir: &Path| {
        let out = tailforge(&[
            "bench",
            "--manifest",
            data.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--strategies",
            "baseline,ros,full",
            "--seeds",
            "1,2",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_code(&out, 0);
    };
    let b1 = dir.path().join("b1");
    let b2 = dir.path().join("b2");
    run(&b1);
    run(&b2);
    let r1 = fs::read(b1.join("results.csv")).unwrap();
    let r2 = fs::read(b2.join("results.csv")).unwrap();
    assert_eq!(r1, r2);
    let text = String::from_utf8(r1).unwrap();
    assert_eq!(text.lines().next(), Some("strategy,seed,head,tail,overall"));
    // 3 strategies x (2 seeds + 1 mean row)
    assert_eq!(text.lines().count(), 1 + 3 * 3);

    // report merges the two results.json files into one summary
    let merged = dir.path().join("merged");
    let out = tailforge(&[
        "report",
        b1.join("results.json").to_str().unwrap(),
        b2.join("results.json").to_str().unwrap(),
        "--out",
        merged.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let merged_csv = fs::read_to_string(merged.join("results.csv")).unwrap();
    // each (strategy, seed) row appears twice plus one mean row per strategy
    assert_eq!(merged_csv.lines().count(), 1 + 3 * 5);
}

#[test]
fn missing_manifest_is_a_validation_error() {
    let out = tailforge(&["train", "--manifest", "/nonexistent", "--out", "/tmp/x-cli-test"]);
    assert_code(&out, 1);
}

#[test]
fn missing_payload_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(dir.path());
    // remove one payload the manifest references
    let manifest = fs::read_to_string(data.join("manifest.csv")).unwrap();
    let first_payload = manifest.lines().nth(1).unwrap().split(',').nth(3).unwrap();
    fs::remove_file(data.join(first_payload)).unwrap();
    let out = tailforge(&[
        "train",
        "--manifest",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_code(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains(first_payload));
}

#[test]
fn bad_config_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(dir.path());
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "learning_rate = 0.1\n").unwrap();
    let out = tailforge(&[
        "train",
        "--manifest",
        data.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_code(&out, 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));
}

#[test]
fn baseline_strategy_student_equals_teacher() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(dir.path());
    let cfg = dir.path().join("base.cfg");
    fs::write(
        &cfg,
        "epochs_phase1 = 5\nhidden_dim = 12\nbatch_size = 16\nstrategy = baseline\n",
    )
    .unwrap();
    let run_dir = dir.path().join("run");
    let out = tailforge(&[
        "train",
        "--manifest",
        data.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let teacher = fs::read(run_dir.join("teacher.ltt1")).unwrap();
    let student = fs::read(run_dir.join("student.ltt1")).unwrap();
    assert_eq!(teacher, student);
    assert!(!run_dir.join("selection.csv").exists());
}
