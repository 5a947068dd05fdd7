use std::fs;

use fed_normec::harness::{parse_config, run_experiment, run_sweep, CSV_SCHEMA};
use fed_normec::Error;

const BASE: &str = r#"
name = "io"
seed = 3

[problem]
family = "quadratic-hetero"
clients = 4
components = 2
dim = 3
"#;

fn spec(extra: &str) -> fed_normec::harness::ExperimentSpec {
    parse_config(&format!("{BASE}\n{extra}")).unwrap()
}

#[test]
fn zero_rounds_write_header_and_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&spec("[params]\nrounds = 0\nbeta = 0.1\neta = 0.01"), dir.path()).unwrap();
    let csv = fs::read_to_string(out.dir.join("replicate_000.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(
        lines[0],
        "algorithm,k,f_value,grad_norm,min_grad_norm,R_k,participants,v_hat_norm,step_norm,degenerate_flag"
    );
    assert!(lines[1].starts_with("fed-alpha-normec,0,"));
    assert_eq!(out.summary.csv_schema, CSV_SCHEMA);
    for f in ["resolved_spec.toml", "bound.json", "summary.json"] {
        assert!(out.dir.join(f).is_file(), "{f} missing");
    }
}

#[test]
fn resolved_spec_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let first = run_experiment(&spec("[params]\nrounds = 20\nbeta = 0.1\neta = 0.01\np = 0.5"), dir.path()).unwrap();
    let resolved = parse_config(&fs::read_to_string(first.dir.join("resolved_spec.toml")).unwrap()).unwrap();
    let again = tempfile::tempdir().unwrap();
    let second = run_experiment(&resolved, again.path()).unwrap();
    assert_eq!(first.records, second.records);
}

#[test]
fn sweep_writes_cells_and_comm_table() {
    let dir = tempfile::tempdir().unwrap();
    let s = spec("[params]\nrounds = 10\neta = 0.01\n\n[sweep]\np = [0.5, 1.0]\nbeta = [0.01, 0.1]");
    let summary = run_sweep(&s, dir.path()).unwrap();
    assert_eq!(summary.cells.len(), 4);
    let root = dir.path().join("io");
    for cell in &summary.cells {
        assert!(cell.error.is_none());
        assert!(root.join(&cell.dir).join("replicate_000.csv").is_file());
    }
    let table = fs::read_to_string(root.join("comm_table.csv")).unwrap();
    // header plus 11 rows per cell
    assert_eq!(table.lines().count(), 1 + 4 * 11);
    assert!(table.starts_with("p,beta,k,transmissions,"));
    assert!(root.join("sweep_summary.json").is_file());

    // the same config lacks a single beta for a plain run
    let err = run_experiment(&s, dir.path()).unwrap_err();
    assert!(matches!(&err, Error::Config { path, .. } if path == "params.beta"), "{err}");
}

#[test]
fn invalid_values_report_their_path() {
    let err = parse_config(&format!("{BASE}\n[params]\np = 1.5")).unwrap_err();
    assert!(matches!(&err, Error::Config { path, .. } if path == "params.p"), "{err}");
    let err = parse_config(&format!("{BASE}\n[params]\nroundz = 3")).unwrap_err();
    assert!(matches!(err, Error::Config { .. }));
}
