use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use slrc_core::compiler::strip_volatile;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn fixture(name: &str) -> String {
    fixtures().join(name).display().to_string()
}

fn slrc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slrc"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("run slrc")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn compile_into(dir: &Path, extra: &[&str]) -> Output {
    let config = fixture("compile.yaml");
    let output = dir.display().to_string();
    let mut args = vec!["--config", &config, "compile", "--output", &output];
    args.extend_from_slice(extra);
    slrc(&args)
}

fn compiled_bundle(tmp: &Path) -> PathBuf {
    let dir = tmp.join("bundle");
    let out = compile_into(&dir, &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    dir
}

#[test]
fn validate_accepts_fixture() {
    let out = slrc(&[
        "validate",
        "--task",
        &fixture("task.yaml"),
        "--dataset",
        &fixture("gold.jsonl"),
    ]);
    assert_eq!(code(&out), 0, "{}{}", stdout(&out), stderr(&out));
}

#[test]
fn validate_reports_unknown_label() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("bad.jsonl");
    std::fs::write(
        &data,
        "{\"id\":\"a\",\"inputs\":{\"abstract\":\"x\"},\"decision\":\"Maybe\"}\n",
    )
    .unwrap();
    let out = slrc(&[
        "validate",
        "--task",
        &fixture("task.yaml"),
        "--dataset",
        &data.display().to_string(),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stdout(&out).contains("FINDING"), "{}", stdout(&out));
}

#[test]
fn validate_missing_file_is_exit_2() {
    let out = slrc(&["validate", "--task", "/nonexistent/task.yaml"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn compile_end_to_end_prints_perfect_val_accuracy() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("bundle");
    let out = compile_into(&dir, &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(
        stdout(&out).lines().any(|l| l == "validation accuracy 1"),
        "{}",
        stdout(&out)
    );
    for name in [
        "config.yaml",
        "prompt.txt",
        "exemplars.json",
        "metrics.json",
        "run.log",
        "prisma.json",
        "manifest.json",
    ] {
        assert!(dir.join(name).is_file(), "missing {name}");
    }
    let config = std::fs::read_to_string(dir.join("config.yaml")).unwrap();
    assert!(
        !config.contains(&tmp.path().display().to_string()),
        "output path leaked into config.yaml"
    );
}

#[test]
fn budget_below_val_size_is_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = compile_into(&tmp.path().join("b"), &["--budget", "2"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(!tmp.path().join("b").exists());
}

#[test]
fn compile_refuses_non_empty_output_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = compiled_bundle(tmp.path());
    assert_eq!(code(&compile_into(&dir, &[])), 2);
    assert_eq!(code(&compile_into(&dir, &["--force"])), 0);
}

#[test]
fn repeat_compile_gives_identical_bundle_content() {
    let tmp = tempfile::tempdir().unwrap();
    let dirs = [tmp.path().join("one"), tmp.path().join("two")];
    for dir in &dirs {
        let out = compile_into(dir, &[]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    for name in [
        "config.yaml",
        "prompt.txt",
        "exemplars.json",
        "metrics.json",
        "prisma.json",
    ] {
        let a = std::fs::read(dirs[0].join(name)).unwrap();
        let b = std::fs::read(dirs[1].join(name)).unwrap();
        assert_eq!(a, b, "{name} differs");
    }
    let log = |d: &Path| strip_volatile(&std::fs::read_to_string(d.join("run.log")).unwrap()).unwrap();
    assert_eq!(log(&dirs[0]), log(&dirs[1]));
}

#[test]
fn screen_writes_one_outcome_per_record() {
    let tmp = tempfile::tempdir().unwrap();
    let bundle = compiled_bundle(tmp.path()).display().to_string();
    let outdir = tmp.path().join("screened");
    let backend = format!("scripted:{}", fixture("script.yaml"));
    let out = slrc(&[
        "screen",
        "--bundle",
        &bundle,
        "--input",
        &fixture("records.jsonl"),
        "--out",
        &outdir.display().to_string(),
        "--backend",
        &backend,
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let outcomes = std::fs::read_to_string(outdir.join("outcomes.jsonl")).unwrap();
    assert_eq!(outcomes.lines().count(), 3);
    let counts: serde_json::Value =
        serde_json::from_slice(&std::fs::read(outdir.join("prisma_counts.json")).unwrap()).unwrap();
    assert_eq!(counts["screened"], 3);
    assert_eq!(counts["review_queue"], 1);
    let queue = std::fs::read_to_string(outdir.join("review_queue.jsonl")).unwrap();
    assert_eq!(queue.lines().count(), 1);
}

#[test]
fn screen_refuses_tampered_bundle_unless_overridden() {
    let tmp = tempfile::tempdir().unwrap();
    let bundle = compiled_bundle(tmp.path());
    let prompt = bundle.join("prompt.txt");
    let mut text = std::fs::read(&prompt).unwrap();
    text[0] ^= 0x20;
    std::fs::write(&prompt, text).unwrap();

    let backend = format!("scripted:{}", fixture("script.yaml"));
    let bundle = bundle.display().to_string();
    let outdir = tmp.path().join("screened").display().to_string();
    let args = [
        "screen",
        "--bundle",
        &bundle,
        "--input",
        &fixture("records.jsonl"),
        "--out",
        &outdir,
        "--backend",
        &backend,
    ];
    let refused = slrc(&args);
    assert_eq!(code(&refused), 1);
    assert!(stderr(&refused).contains("prompt.txt"), "{}", stderr(&refused));

    let mut forced = args.to_vec();
    forced.push("--no-verify");
    let out = slrc(&forced);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stderr(&out).contains("warning"), "{}", stderr(&out));
}

#[test]
fn verify_names_the_mutated_file() {
    let tmp = tempfile::tempdir().unwrap();
    let bundle = compiled_bundle(tmp.path());
    let arg = bundle.display().to_string();
    assert_eq!(code(&slrc(&["verify", &arg])), 0);

    let metrics = bundle.join("metrics.json");
    let mut bytes = std::fs::read(&metrics).unwrap();
    let last = bytes.len() - 2;
    bytes[last] ^= 0x01;
    std::fs::write(&metrics, bytes).unwrap();
    let out = slrc(&["verify", &arg]);
    assert_eq!(code(&out), 1);
    let text = stdout(&out);
    let failed: Vec<&str> = text.lines().filter(|l| l.starts_with("FAIL")).collect();
    assert_eq!(failed.len(), 1, "{text}");
    assert!(failed[0].starts_with("FAIL metrics.json"));
}

#[test]
fn verify_without_manifest_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = slrc(&["verify", &tmp.path().display().to_string()]);
    assert_eq!(code(&out), 1);
}

#[test]
fn replay_from_cache_matches_and_detects_divergence() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().join("cache.jsonl").display().to_string();
    let dir = tmp.path().join("bundle");
    let out = compile_into(&dir, &["--cache", &cache]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let bundle = dir.display().to_string();

    let out = slrc(&["replay", &bundle, "--cache", &cache]);
    assert_eq!(code(&out), 0, "{}{}", stdout(&out), stderr(&out));

    let script = tmp.path().join("always_exclude.yaml");
    std::fs::write(&script, "default: \"Decision: Exclude\"\n").unwrap();
    let out = slrc(&[
        "replay",
        &bundle,
        "--backend",
        &format!("scripted:{}", script.display()),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stdout(&out).contains("MISMATCH"), "{}", stdout(&out));
}

#[test]
fn eval_scores_a_bundle_on_gold_data() {
    let tmp = tempfile::tempdir().unwrap();
    let bundle = compiled_bundle(tmp.path()).display().to_string();
    let report = tmp.path().join("eval.json");
    let out = slrc(&[
        "eval",
        "--bundle",
        &bundle,
        "--dataset",
        &fixture("gold.jsonl"),
        "--backend",
        &format!("scripted:{}", fixture("script.yaml")),
        "--out",
        &report.display().to_string(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).lines().any(|l| l == "eval accuracy 1"), "{}", stdout(&out));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(report).unwrap()).unwrap();
    assert_eq!(json["items"].as_array().unwrap().len(), 15);
}
