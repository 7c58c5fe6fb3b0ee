use std::fs;
use std::process::{Command, Output};

use drmpc::sim::{ExperimentConfig, SweepSpec, CSV_HEADER};
use drmpc::svm::SvmModel;

fn drmpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drmpc")).args(args).output().expect("run drmpc")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL_RUN: &str = r#"{
  "system": {"a": [[1, 1], [0, 1]], "b": [[0.5], [1]], "noise_cov": [[0.1, 0], [0, 0.1]]},
  "constraints": ["lin"],
  "scenarios": {"count": 6},
  "seed": 3,
  "initial_state": [-10, 0],
  "tightening": {"kind": "grad", "epsilon": 0.5},
  "runs": 4,
  "sim_steps": 8,
  "horizon": 6
}"#;

#[test]
fn radius_prints_formula_value() {
    let o = drmpc(&["radius", "--n", "34", "--alpha", "0.05"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "0.591284");
}

#[test]
fn radius_rejects_bad_alpha() {
    assert_eq!(drmpc(&["radius", "--n", "34", "--alpha", "1.5"]).status.code(), Some(1));
}

#[test]
fn missing_config_exits_one_with_path() {
    let o = drmpc(&["run", "--config", "/no/such/config.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/no/such/config.json"), "{}", stderr(&o));
}

#[test]
fn malformed_config_reports_position() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, "{\n  \"horizon\": ,\n}").unwrap();
    let o = drmpc(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2 column"), "{}", stderr(&o));
}

#[test]
fn unknown_field_and_usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("extra.json");
    fs::write(&path, SMALL_RUN.replace("\"seed\": 3", "\"seed\": 3, \"sede\": 4")).unwrap();
    let o = drmpc(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("sede"), "{}", stderr(&o));
    assert_eq!(drmpc(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(drmpc(&["sweep", "--modes", "tube,magic"]).status.code(), Some(1));
}

#[test]
fn run_writes_csv_metadata_and_traces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, SMALL_RUN).unwrap();
    ExperimentConfig::load(&cfg).unwrap();
    let out = dir.path().join("out.csv");
    let traces = dir.path().join("traces.jsonl");
    let o = drmpc(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--traces",
        traces.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("grad,0,0.5,6,"), "{}", lines[1]);
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out.csv.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["schema_version"], 1);
    let traces = fs::read_to_string(&traces).unwrap();
    assert_eq!(traces.lines().count(), 4);
    for line in traces.lines() {
        let t: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(t["record"]["steps"].as_array().unwrap().len(), 8);
    }
}

#[test]
fn run_seed_override_changes_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, SMALL_RUN).unwrap();
    let a = stdout(&drmpc(&["run", "--config", cfg.to_str().unwrap()]));
    let b = stdout(&drmpc(&["run", "--config", cfg.to_str().unwrap()]));
    let c = stdout(&drmpc(&["run", "--config", cfg.to_str().unwrap(), "--seed", "4"]));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn sweep_spec_dump_round_trips() {
    let o = drmpc(&["sweep", "--preset", "small-sample", "--runs", "10", "--dump-spec"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let spec: SweepSpec = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(spec.base.runs, 10);
    assert_eq!(spec.methods.len(), 2);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("spec.json");
    fs::write(&path, stdout(&o)).unwrap();
    let o = drmpc(&["sweep", "--config", path.to_str().unwrap(), "--modes", "tube"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[1].starts_with("tube,0,0,5,"), "{}", rows[1]);
}

#[test]
fn train_svm_saves_loadable_model() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("svm.json");
    let o = drmpc(&["train-svm", "--out", model.to_str().unwrap(), "--count", "120"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(summary["training_accuracy"], 1.0);
    let m = SvmModel::load_json(&model).unwrap();
    assert_eq!(m.support_vectors.len() as u64, summary["support_vectors"].as_u64().unwrap());
}

#[test]
fn selftest_passes() {
    let o = drmpc(&["selftest"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).lines().all(|l| l.starts_with("PASS ")));
}

#[test]
fn shipped_configs_parse() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    assert_eq!(SweepSpec::load(dir.join("table1.json")).unwrap(), drmpc::sim::table1_spec());
    assert_eq!(SweepSpec::load(dir.join("small_sample.json")).unwrap(), drmpc::sim::small_sample_spec());
    for name in ["svm_native.json", "exp_kdrc.json"] {
        ExperimentConfig::load(dir.join(name)).unwrap().resolved().unwrap();
    }
    SvmModel::load_json(dir.join("svm_model.json")).unwrap();
}
