use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
name = "cli"
seed = 4

[problem]
family = "quadratic-homo"
clients = 3
components = 2
dim = 2

[params]
rounds = 5
beta = 0.1
eta = 0.01
"#;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fed-normec"));
    cmd.env_remove("FED_NORMEC_OUTPUT");
    cmd
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

#[test]
fn run_writes_under_env_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let root = dir.path().join("out");
    let out = bin().env("FED_NORMEC_OUTPUT", &root).arg("run").arg(&config).output().unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("cli").join("replicate_000.csv").is_file());
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["rounds"], 5);
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let run = |seed: &str, root: &str| {
        let root = dir.path().join(root);
        let out = bin().args(["--seed", seed, "--output-root"]).arg(&root).arg("run").arg(&config).output().unwrap();
        assert_eq!(code(&out), 0);
        let resolved = std::fs::read_to_string(root.join("cli").join("resolved_spec.toml")).unwrap();
        (resolved, std::fs::read(root.join("cli").join("replicate_000.csv")).unwrap())
    };
    let (spec_a, csv_a) = run("99", "a");
    let (_, csv_b) = run("99", "b");
    let (_, csv_c) = run("100", "c");
    assert!(spec_a.contains("seed = 99"));
    assert_eq!(csv_a, csv_b);
    assert_ne!(csv_a, csv_c);
}

#[test]
fn exit_codes_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), &CONFIG.replace("eta = 0.01", "eta = 0.01\np = 1.5"));
    let out = bin().arg("--output-root").arg(dir.path()).arg("run").arg(&bad).output().unwrap();
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("params.p"));

    let missing = bin().args(["bound", "/nonexistent/config.toml"]).output().unwrap();
    assert_eq!(code(&missing), 3);

    let usage = bin().arg("frobnicate").output().unwrap();
    assert_eq!(code(&usage), 2);

    let diverging = write_config(dir.path(), &CONFIG.replace("eta = 0.01", "eta = 1e308\nserver_normalize = false"));
    let out = bin().arg("--output-root").arg(dir.path()).arg("run").arg(&diverging).output().unwrap();
    assert_eq!(code(&out), 5, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bound_and_verify_print_json() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let out = bin().arg("bound").arg(&config).output().unwrap();
    assert_eq!(code(&out), 0);
    let bound: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(bound["report"]["total"].as_f64().unwrap() > 0.0);

    let out = bin().args(["verify", "sampling"]).output().unwrap();
    assert_eq!(code(&out), 0);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], true);
}
