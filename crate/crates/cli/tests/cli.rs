use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use corro_cli::artifacts::verify_manifest;

const TINY: &str = "\
# small end-to-end run
family = point-robot
num_train_tasks = 3
num_test_tasks = 2
collect_warmup = 60
collect_steps = 40
collect_batch_size = 32
collect_checkpoint_interval = 20
contrast_steps = 15
contrast_task_batch_size = 3
cvae_steps = 10
relabel_steps = 10
meta_steps = 12
meta_batch_size = 32
meta_task_batch_size = 3
context_length = 20
ood_samples = 2
embedding_samples = 20
";

fn corro(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_corro")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = corro(args);
    assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
    stdout(&o)
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let path = dir.join("run.conf");
    std::fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name).display().to_string()
}

fn value(summary: &str, key: &str) -> f64 {
    summary
        .lines()
        .find_map(|l| l.strip_prefix(key).map(|v| v.trim().parse().unwrap()))
        .unwrap_or_else(|| panic!("{key} missing from {summary}"))
}

fn assert_one_line_failure(o: &Output, needle: &str) {
    assert!(!o.status.success());
    let err = stderr(o);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains(needle), "{err}");
}

#[test]
fn unknown_config_key_is_rejected_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "seed = 1\nlearning_rat = 0.1\n").unwrap();
    let o = corro(&["--config", conf.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "oracle"]);
    assert_one_line_failure(&o, "line 2");
}

#[test]
fn bad_arguments_fail_with_one_line() {
    assert_one_line_failure(&corro(&["launch"]), "launch");
    assert_one_line_failure(&corro(&["--seed", "x", "oracle"]), "x");
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_one_line_failure(&corro(&["--out", out, "--protocol", "iid", "oracle"]), "--protocol");
    assert_one_line_failure(&corro(&["--out", out, "--protocol", "sideways", "eval"]), "sideways");
}

#[test]
fn stages_require_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_one_line_failure(&corro(&["--out", out, "train"]), "collect");
    assert_one_line_failure(&corro(&["--out", out, "eval"]), "train");
    assert_one_line_failure(&corro(&["--out", out, "report"]), "eval");
}

#[test]
fn oracle_on_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let s = ok(&["--out", out, "oracle", &fixture("bijective.tab")]);
    assert!((value(&s, "exact_mi") - 4f64.ln()).abs() < 1e-12, "{s}");
    assert!(s.contains("bound holds"));
    let s = ok(&["--out", out, "oracle", &fixture("constant.tab")]);
    assert!(value(&s, "exact_mi").abs() < 1e-12, "{s}");
    assert!((value(&s, "infonce_bound") + 4f64.ln()).abs() < 1e-12, "{s}");
    assert!(s.contains("bound holds"));

    let s = ok(&["--out", out, "--seed", "3", "oracle"]);
    assert!(s.contains("bound holds"), "{s}");
    assert!(dir.path().join("oracle/tabulation.txt").exists());
    assert_eq!(verify_manifest(dir.path(), "oracle").unwrap(), 3);
}

#[test]
fn resolved_config_is_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), "");
    ok(&["--config", conf.to_str().unwrap(), "--seed", "9", "--out", dir.path().to_str().unwrap(), "oracle"]);
    let echo = std::fs::read_to_string(dir.path().join("config-oracle.txt")).unwrap();
    assert!(echo.contains("seed = 9"));
    assert!(echo.contains("strategy = randomize"));
    assert!(echo.contains("gamma = 0.99"));
}

fn pipeline(dir: &Path, extra: &str) -> String {
    let conf = write_config(dir, extra);
    let (conf, out) = (conf.to_str().unwrap().to_string(), dir.to_str().unwrap().to_string());
    let base = ["--config", &conf, "--out", &out];
    ok(&[&base[..], &["collect"]].concat());
    ok(&[&base[..], &["train"]].concat());
    ok(&[&base[..], &["--protocol", "iid", "eval"]].concat());
    ok(&[&base[..], &["--protocol", "ood", "eval"]].concat());
    ok(&[&base[..], &["report"]].concat())
}

#[test]
fn full_pipeline_writes_verified_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let summary = pipeline(dir.path(), "eval_seeds = 5\n");
    assert!(summary.contains("iid"), "{summary}");
    assert!(summary.contains("ood"), "{summary}");
    for cmd in ["collect", "train", "eval-iid", "eval-ood", "report"] {
        assert!(verify_manifest(dir.path(), cmd).unwrap() > 0, "{cmd}");
    }
    let reports = std::fs::read_dir(dir.path().join("reports")).unwrap().count();
    assert_eq!(reports, 2 * (5 + 1));
    let agg = std::fs::read_to_string(dir.path().join("reports/iid-aggregate.txt")).unwrap();
    assert!(agg.starts_with("protocol iid seeds 0,1,2,3,4 mean"), "{agg}");

    // randomize needs no fitted model; the contrastive encoder is saved
    assert!(dir.path().join("model/theta1.bundle").exists());
    assert!(!dir.path().join("model/cvae.bundle").exists());

    let metrics = std::fs::read_to_string(dir.path().join("metrics.txt")).unwrap();
    let steps: Vec<usize> = metrics.lines().map(|l| l.split(' ').next().unwrap().parse().unwrap()).collect();
    assert!(steps.windows(2).all(|w| w[0] <= w[1]));
    for name in ["contrastive", "critic", "actor"] {
        assert!(metrics.lines().any(|l| l.split(' ').nth(1) == Some(name)), "{name}");
    }
    let embeddings = std::fs::read_to_string(dir.path().join("embeddings.txt")).unwrap();
    assert_eq!(embeddings.lines().filter(|l| !l.starts_with('#')).count(), 2 * 20);
}

#[test]
fn reruns_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("run");
    pipeline(&a, "");
    let first: Vec<(String, String)> = manifests(&a);
    std::fs::remove_dir_all(&a).unwrap();
    pipeline(&a, "");
    assert_eq!(first, manifests(&a));
}

fn manifests(dir: &Path) -> Vec<(String, String)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_str().unwrap().starts_with("manifest-"))
        .map(|p| (p.display().to_string(), std::fs::read_to_string(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn generative_strategy_saves_its_model() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), "strategy = generative\n");
    assert!(dir.path().join("model/cvae.bundle").exists());
    let metrics = std::fs::read_to_string(dir.path().join("metrics.txt")).unwrap();
    assert!(metrics.lines().any(|l| l.split(' ').nth(1) == Some("cvae")));
}

#[test]
fn baseline_mode_skips_the_contrastive_stage() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), "mode = offline-pearl\n");
    assert!(!dir.path().join("model/theta1.bundle").exists());
    let metrics = std::fs::read_to_string(dir.path().join("metrics.txt")).unwrap();
    assert!(!metrics.contains("contrastive"));
    assert!(metrics.lines().next().unwrap().starts_with("0 "));
}

#[test]
fn ood_eval_needs_checkpoint_pools() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), "");
    std::fs::remove_file(dir.path().join("checkpoints/train-000.pool")).unwrap();
    let conf = dir.path().join("run.conf");
    let o = corro(&[
        "--config",
        conf.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--protocol",
        "ood",
        "eval",
    ]);
    assert_one_line_failure(&o, "checkpoint pool");
}
