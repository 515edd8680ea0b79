use std::path::Path;
use std::process::{Command, Output};

fn tclsim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tclsim"))
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("exp.toml");
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

const SMALL: &str = "[environment]\nhouses = 4\n[experiment]\nhorizon = 200\nwarmup = 20\nseeds = [1, 2]\n";

#[test]
fn missing_config_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tclsim(tmp.path(), &["--config", "/nonexistent/exp.toml", "evaluate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn invalid_values_are_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    for bad in ["[environment]\nhouses = 0\n", "[agent]\ncontroller = \"oracle\"\n", "[experiment]\nbogus = 1\n"] {
        let cfg = write_config(tmp.path(), bad);
        assert_eq!(tclsim(tmp.path(), &["--config", &cfg, "evaluate"]).status.code(), Some(2), "{bad}");
    }
}

#[test]
fn policy_without_checkpoint_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{SMALL}[agent]\ncontroller = \"policy\"\n"));
    assert_eq!(tclsim(tmp.path(), &["--config", &cfg, "evaluate"]).status.code(), Some(2));
}

#[test]
fn evaluate_writes_versioned_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tclsim(tmp.path(), &["--config", &cfg, "evaluate"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(tmp.path().join("evaluate.csv")).unwrap();
    assert!(text.starts_with("# schema_version=1"));
    // Header, two seeds, mean and std.
    assert_eq!(text.lines().skip(1).count(), 5, "{text}");
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    assert!(tclsim(tmp.path(), &["--config", &cfg, "--seed", "7", "evaluate"]).status.success());
    let text = std::fs::read_to_string(tmp.path().join("evaluate.csv")).unwrap();
    assert_eq!(text.lines().skip(1).count(), 4, "{text}");
    assert_eq!(tclsim(tmp.path(), &["--config", &cfg, "--seed", "x..y", "evaluate"]).status.code(), Some(2));
}

#[test]
fn trained_checkpoint_deploys_through_the_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{SMALL}[agent.ppo]\nepisode_steps = 100\nepochs = 1\n"));
    let out = tclsim(tmp.path(), &["--config", &cfg, "train", "--agent", "ppo_nc"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = tmp.path().join("ppo_nc.ckpt");
    assert!(ckpt.exists());
    let log = std::fs::read_to_string(tmp.path().join("ppo_nc_train.jsonl")).unwrap();
    assert!(log.lines().next().unwrap().contains("schema_version"));

    for controller in ["policy", "policy_sampled"] {
        let deploy = write_config(
            tmp.path(),
            &format!("{SMALL}[agent]\ncontroller = \"{controller}\"\ncheckpoint = \"{}\"\n", ckpt.display()),
        );
        let out = tclsim(tmp.path(), &["--config", &deploy, "evaluate"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("bad.ckpt");
    std::fs::write(&ckpt, b"not a checkpoint").unwrap();
    let cfg = write_config(
        tmp.path(),
        &format!("{SMALL}[agent]\ncontroller = \"policy\"\ncheckpoint = \"{}\"\n", ckpt.display()),
    );
    let code = tclsim(tmp.path(), &["--config", &cfg, "evaluate"]).status.code();
    assert!(matches!(code, Some(1) | Some(2)), "{code:?}");
}
