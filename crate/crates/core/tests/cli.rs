mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::tiny_run_toml;
use fatlab::pipeline::{RunConfig, RunManifest};

fn fatlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fatlab"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn fatlab")
}

fn write_config(root: &Path) -> String {
    let cfg = root.join("run.toml");
    fs::write(&cfg, tiny_run_toml(&root.join("run"))).unwrap();
    cfg.display().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn missing_config_is_a_config_error() {
    let o = fatlab(&["simulate", "--config", "/nonexistent/run.toml"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_key_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(
        &cfg,
        tiny_run_toml(tmp.path()).replace("[corpus]", "[corpus]\nutterances = 3"),
    )
    .unwrap();
    let o = fatlab(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("utterances"));
}

#[test]
fn bad_thread_cap_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let o = Command::new(env!("CARGO_BIN_EXE_fatlab"))
        .args(["simulate", "--config", &cfg, "--dry-run"])
        .env("FATLAB_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn dump_config_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let o = fatlab(&["report", "--config", &cfg, "--dump-config"]);
    assert_eq!(o.status.code(), Some(0));
    let dumped = RunConfig::from_toml(&stdout(&o)).unwrap();
    assert_eq!(dumped, RunConfig::load(Path::new(&cfg)).unwrap());
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn dry_run_touches_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let o = fatlab(&["all", "--config", &cfg, "--dry-run"]);
    assert_eq!(o.status.code(), Some(0));
    let plan = stdout(&o);
    assert!(plan.contains("[simulate]") && plan.contains("[report]"));
    assert!(plan.contains("evaluate:OA_first"));
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn fusion_sweep_lists_every_system() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let o = fatlab(&["pretrain", "--config", &cfg, "--dry-run", "--sweep", "fusion"]);
    assert_eq!(o.status.code(), Some(0));
    let plan = stdout(&o);
    for sys in ["baseline", "imst", "OA_first", "SF_last", "DA_all"] {
        assert!(plan.contains(&format!("pretrain:{sys}")), "{sys} missing from\n{plan}");
    }
    assert_eq!(plan.matches("pretrain:").count(), 11);
}

#[test]
fn stage_without_inputs_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let o = fatlab(&["evaluate", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("first"));
}

#[test]
fn rerun_is_a_no_op_and_tampering_reruns() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let run = tmp.path().join("run");
    assert_eq!(fatlab(&["all", "--config", &cfg]).status.code(), Some(0));
    let before = RunManifest::load(&run).unwrap();
    let csv = fs::read(run.join("report/eval.csv")).unwrap();

    let again = fatlab(&["all", "--config", &cfg]);
    assert_eq!(again.status.code(), Some(0));
    assert!(stdout(&again).lines().all(|l| l.contains("ran 0")), "{}", stdout(&again));
    assert_eq!(RunManifest::load(&run).unwrap(), before);

    // a damaged checkpoint makes that unit and everything after it stale
    let ft = before.get("finetune:imst").unwrap();
    let victim = ft.outputs.keys().next().unwrap();
    fs::write(run.join(victim), b"damaged").unwrap();
    let dry = stdout(&fatlab(&["all", "--config", &cfg, "--dry-run"]));
    assert!(
        dry.contains("finetune:imst") && dry.lines().any(|l| l.contains("evaluate:imst") && l.contains("run")),
        "{dry}"
    );
    assert_eq!(fatlab(&["finetune", "--config", &cfg]).status.code(), Some(0));
    assert_eq!(fatlab(&["all", "--config", &cfg]).status.code(), Some(0));
    // deterministic retraining restores identical outputs
    assert_eq!(RunManifest::load(&run).unwrap(), before);
    assert_eq!(fs::read(run.join("report/eval.csv")).unwrap(), csv);
}
