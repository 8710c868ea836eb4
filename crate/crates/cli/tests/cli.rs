use std::fs;
use std::path::Path;
use std::process::Command;

use fbsde_cli::{parse_assignment, ConfigError, Experiment, ExperimentConfig, Overrides, Params};
use serde_json::json;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fbsde"))
}

fn write_config(dir: &Path, value: serde_json::Value) -> std::path::PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, value.to_string()).unwrap();
    path
}

fn invalid_key(r: Result<ExperimentConfig, ConfigError>) -> String {
    match r {
        Err(ConfigError::Invalid { key, .. }) => key,
        other => panic!("expected a named invalid key, got {other:?}"),
    }
}

#[test]
fn defaults_resolve_for_every_experiment() {
    for e in [
        Experiment::Forward,
        Experiment::Solve,
        Experiment::Pde,
        Experiment::Sweep,
        Experiment::Ldp,
        Experiment::Burgers,
        Experiment::Ns2d,
        Experiment::Proptest,
    ] {
        let cfg = ExperimentConfig::resolve(e, None, &Overrides::default()).unwrap();
        assert_eq!(cfg.experiment, e);
        assert_eq!(cfg.output, Path::new("out").join(e.name()));
    }
}

#[test]
fn effective_config_round_trips() {
    let overrides = Overrides { seed: Some(9), output: Some("x".into()), params: vec![parse_assignment("coupled={}").unwrap()] };
    let cfg = ExperimentConfig::resolve(Experiment::Burgers, None, &overrides).unwrap();
    let again = ExperimentConfig::from_json(&cfg.to_json().to_string()).unwrap();
    assert_eq!(cfg, again);
    match again.params {
        Params::Burgers(p) => assert!(p.coupled.is_some()),
        _ => panic!("wrong experiment"),
    }
}

#[test]
fn unknown_keys_are_rejected_at_every_level() {
    let top = json!({"schema": 1, "experiment": "solve", "extra": 1}).to_string();
    assert!(matches!(ExperimentConfig::from_json(&top), Err(ConfigError::Parse(m)) if m.contains("extra")));
    let nested = json!({"schema": 1, "experiment": "solve", "params": {"transform": {"c": 1, "bogus": 2}}}).to_string();
    assert!(matches!(ExperimentConfig::from_json(&nested), Err(ConfigError::Parse(m)) if m.contains("bogus")));
    let model = json!({"schema": 1, "experiment": "solve", "params": {"model": {"kind": "brownian", "params": {"theta": 1}}}}).to_string();
    assert_eq!(invalid_key(ExperimentConfig::from_json(&model)), "params.model.params.theta");
}

#[test]
fn preconditions_name_the_offending_key() {
    let cases = [
        (Experiment::Solve, "paths=4", "params.paths"),
        (Experiment::Solve, "x0=[0,1]", "params.x0"),
        (Experiment::Sweep, "epsilons=[0.5,1.5]", "params.epsilons[1]"),
        (Experiment::Burgers, "lambda=-1", "params.lambda"),
        (Experiment::Ns2d, "nu=0", "params.nu"),
        (Experiment::Ldp, "model.kind=\"mean_reverting\"", "params.model"),
        (Experiment::Ldp, "event={\"kind\":\"endpoint\",\"target\":[1,2]}", "params.event"),
        (Experiment::Pde, "n_x=4", "params.n_x"),
        (Experiment::Proptest, "suites=[\"nope\"]", "params.suites"),
        (Experiment::Sweep, "driver.kind=\"nope\"", "params.driver"),
    ];
    for (e, set, key) in cases {
        let overrides = Overrides { params: vec![parse_assignment(set).unwrap()], ..Overrides::default() };
        assert_eq!(invalid_key(ExperimentConfig::resolve(e, None, &overrides)), key, "{set}");
    }
}

#[test]
fn schema_and_experiment_are_checked() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), json!({"schema": 2, "experiment": "solve"}));
    assert!(matches!(ExperimentConfig::resolve(Experiment::Solve, Some(&path), &Overrides::default()), Err(ConfigError::Schema(2))));
    let path = write_config(dir.path(), json!({"schema": 1, "experiment": "pde"}));
    assert!(matches!(ExperimentConfig::resolve(Experiment::Solve, Some(&path), &Overrides::default()), Err(ConfigError::Mismatch { .. })));
    let missing = dir.path().join("missing.json");
    assert!(matches!(ExperimentConfig::resolve(Experiment::Solve, Some(&missing), &Overrides::default()), Err(ConfigError::Io { .. })));
}

#[test]
fn assignments_parse_json_or_fall_back_to_strings() {
    assert_eq!(parse_assignment("a.b=0.5").unwrap(), ("a.b".into(), json!(0.5)));
    assert_eq!(parse_assignment("kind=cos").unwrap(), ("kind".into(), json!("cos")));
    assert!(parse_assignment("novalue").is_err());
    assert!(parse_assignment("a..b=1").is_err());
}

#[test]
fn file_values_are_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), json!({"schema": 1, "experiment": "solve", "seed": 3, "params": {"paths": 100}}));
    let overrides = Overrides { seed: Some(4), output: None, params: vec![parse_assignment("steps=7").unwrap()] };
    let cfg = ExperimentConfig::resolve(Experiment::Solve, Some(&path), &overrides).unwrap();
    assert_eq!(cfg.seed, 4);
    match cfg.params {
        Params::Solve(p) => assert_eq!((p.paths, p.steps), (100, 7)),
        _ => panic!("wrong experiment"),
    }
}

#[test]
fn config_errors_exit_with_code_2() {
    let out = bin().args(["solve", "--set", "paths=3"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("params.paths"));
    let out = bin().args(["sweep", "--set", "nonsense=1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

fn run_solve(dir: &Path, threads: &str) -> Vec<u8> {
    let out = bin()
        .args(["solve", "--seed", "11", "--threads", threads, "--out"])
        .arg(dir)
        .args(["--set", "paths=3000", "--set", "steps=10", "--set", "gradient=true", "--set", "transform={}"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    fs::read(dir.join("solve.csv")).unwrap()
}

#[test]
fn csv_output_is_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let one = run_solve(&dir.path().join("a"), "1");
    let four = run_solve(&dir.path().join("b"), "4");
    assert_eq!(one, four);
    let text = String::from_utf8(one).unwrap();
    assert!(text.starts_with("method,y0,y0_stderr,"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn manifest_echoes_the_effective_config() {
    let dir = tempfile::tempdir().unwrap();
    run_solve(dir.path(), "2");
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join(fbsde_cli::MANIFEST)).unwrap()).unwrap();
    assert_eq!(manifest["config"]["seed"], 11);
    assert_eq!(manifest["outputs"], json!(["solve.csv"]));
    assert_eq!(manifest["threads"], 2);
    let again = ExperimentConfig::from_json(&manifest["config"].to_string()).unwrap();
    assert_eq!(again.seed, 11);
}

#[test]
fn flagged_runs_exit_with_code_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["ns2d", "--out"])
        .arg(dir.path())
        .args(["--set", "paths=2000", "--set", "steps=5", "--set", "grid_n=3", "--set", "basis_degree=4", "--set", "div_tol=1e-12"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(dir.path().join("ns2d.csv")).unwrap();
    assert!(table.starts_with("x1,x2,u1,u2,div_fd,div_grad"));
    assert_eq!(table.lines().count(), 10);
}

#[test]
fn ldp_writes_rate_path_and_empirical_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["ldp", "--out"])
        .arg(dir.path())
        .args(["--set", "nodes=16", "--set", "restarts=2", "--set", "empirical={\"epsilons\":[0.5,0.3],\"paths\":2000,\"steps\":20}"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["ldp_rate.csv", "ldp_path.csv", "ldp_empirical.csv", "manifest"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let path = fs::read_to_string(dir.path().join("ldp_path.csv")).unwrap();
    assert!(path.starts_with("node,t,x1"));
    assert_eq!(path.lines().count(), 18);
}

#[test]
fn shipped_configs_resolve() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let text = fs::read_to_string(&path).unwrap();
        let cfg = ExperimentConfig::from_json(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(path.file_stem().unwrap(), cfg.experiment.name());
        seen += 1;
    }
    assert_eq!(seen, 8);
}

#[test]
fn forward_writes_terminal_states_and_gap_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["forward", "--paths", "50", "--steps", "10", "--out"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let gap = fs::read_to_string(dir.path().join("forward_gap.csv")).unwrap();
    assert!(gap.starts_with("epsilon,gap_p2,gap_p4"));
    let terminal = fs::read_to_string(dir.path().join("forward_terminal.csv")).unwrap();
    assert_eq!(terminal.lines().count(), 1 + 4 * 50);
}
