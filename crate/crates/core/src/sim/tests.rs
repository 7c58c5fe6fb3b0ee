use super::*;
use crate::constraints::GridSpec;

fn base(mode: TighteningMode) -> ExperimentConfig {
    ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        system: SystemSpec::double_integrator(0.1),
        q: default_q(),
        r: default_r(),
        horizon: 6,
        constraints: vec![ConstraintChoice::Lin],
        scenarios: ScenarioSizing::Count(8),
        scenario_draws: 1,
        seed: 3,
        initial_state: vec![-8.0, 0.0],
        mismatch_lambda: 0.0,
        tightening: mode,
        epsilon_source: None,
        kdrc_form: KdrcForm::Nested,
        runs: 20,
        sim_steps: 10,
        output: None,
    }
}

fn record(flags: &[&[bool]]) -> ClosedLoopRecord {
    ClosedLoopRecord {
        run: 0,
        draw: 0,
        cost: 0.0,
        steps: flags
            .iter()
            .map(|f| StepRecord {
                state: vec![0.0, 0.0],
                input: vec![0.0],
                nominal: vec![0.0, 0.0],
                satisfied: f.to_vec(),
                infeasible: false,
                solve_seconds: 0.0,
            })
            .collect(),
    }
}

#[test]
fn satisfaction_pools_steps_and_runs() {
    let a = record(&[&[true, true], &[true, false], &[true, true]]);
    let b = record(&[&[true, true]]);
    assert!((empirical_satisfaction(&[a.clone(), b.clone()]).unwrap() - 0.75).abs() < 1e-15);
    assert!((per_run_minimum(&[a, b]).unwrap() - 0.5).abs() < 1e-15);
    assert!(empirical_satisfaction(&[]).unwrap_err().is_input());
    assert!(empirical_satisfaction(&[record(&[])]).unwrap_err().is_input());
    assert!(per_run_minimum(&[]).unwrap_err().is_input());
}

#[test]
fn config_json_defaults_and_errors() {
    let text = r#"{"constraints": ["lin", "exp"], "initial_state": [-15, 0],
        "tightening": {"kind": "grad", "epsilon": 1.5}}"#;
    let cfg = ExperimentConfig::from_json(text).unwrap();
    assert_eq!(cfg.horizon, 12);
    assert_eq!(cfg.scenarios.count().unwrap(), 35);
    assert_eq!(cfg.sim_steps, 30);
    assert_eq!(cfg.resolve_epsilon().unwrap(), 1.5);
    let back = ExperimentConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(back, cfg);

    let bad = [
        r#"{"constraints": ["lin"], "initial_state": [0, 0], "tightening": {"kind": "tube"}, "colour": 1}"#,
        r#"{"constraints": ["lin"], "initial_state": [0], "tightening": {"kind": "tube"}}"#,
        r#"{"constraints": ["lin"], "initial_state": [0, 0], "tightening": {"kind": "tube"}, "runs": 0}"#,
        r#"{"constraints": ["lin"], "initial_state": [0, 0], "tightening": {"kind": "tube"}, "schema_version": 9}"#,
        r#"{"constraints": ["lin"], "initial_state": [0, 0], "tightening": {"kind": "grad", "epsilon": -1}}"#,
        r#"{"constraints": ["lin"], "initial_state": [0, 0], "tightening": {"kind": "tube"}"#,
    ];
    for b in bad {
        assert!(ExperimentConfig::from_json(b).unwrap_err().is_input(), "{b}");
    }
}

#[test]
fn malformed_json_reports_position() {
    let err = ExperimentConfig::from_json("{\n  \"runs\": ,\n}").unwrap_err();
    assert!(err.to_string().contains("line 2"), "{err}");
}

#[test]
fn lemma_bound_epsilon() {
    let mut cfg = base(kdrc_mode(0.0, 1.0, GridSpec::default()));
    cfg.scenarios = ScenarioSizing::Count(34);
    cfg.epsilon_source = Some(EpsilonSource::LemmaBound { alpha: 0.05 });
    assert!((cfg.resolve_epsilon().unwrap() - 0.591284).abs() < 1e-6);
    let mut tube = cfg.clone();
    tube.tightening = TighteningMode::ScenarioOnly;
    assert_eq!(tube.resolve_epsilon().unwrap(), 0.0);
}

#[test]
fn verify_epsilon_grows_with_mismatch() {
    let mut cfg = base(TighteningMode::GradientNorm { epsilon: 0.0 });
    cfg.epsilon_source = Some(EpsilonSource::Verify { alpha: 0.05, samples: 400, step: 10 });
    let lemma = mmd_radius_bound(8, 0.05, 1.0).unwrap().epsilon;
    let e0 = cfg.resolve_epsilon().unwrap();
    cfg.mismatch_lambda = 0.3;
    let e1 = cfg.resolve_epsilon().unwrap();
    assert!(e0 >= lemma && e0 < lemma + 0.1, "{e0}");
    assert!(e1 > e0 + 0.05, "{e0} {e1}");
}

#[test]
fn noiseless_run_tracks_nominal() {
    let mut cfg = base(TighteningMode::ScenarioOnly);
    cfg.system = SystemSpec::double_integrator(0.0);
    let p = PreparedExperiment::prepare(&cfg).unwrap();
    let r = p.run(4);
    for (k, s) in r.steps.iter().enumerate() {
        assert!(s.input.iter().zip(&p.schedules[0].steps[k].nominal_input).all(|(a, b)| (a - b).abs() < 1e-9));
        if k + 1 < r.steps.len() {
            let z = &p.schedules[0].steps[k + 1].nominal_state;
            assert!(s.state.iter().zip(z).all(|(a, b)| (a - b).abs() < 1e-6), "{k}");
        }
        assert!(s.satisfied.iter().all(|f| *f));
    }
    assert_eq!(empirical_satisfaction(&[r]).unwrap(), 1.0);
}

#[test]
fn runs_are_deterministic_and_distinct() {
    let p = PreparedExperiment::prepare(&base(TighteningMode::GradientNorm { epsilon: 0.5 })).unwrap();
    assert_eq!(p.run(2), p.run(2));
    assert_ne!(p.run(2).steps, p.run(3).steps);
    let states = |r: &ClosedLoopRecord| r.steps.iter().map(|s| s.state.clone()).collect::<Vec<_>>();
    let again = run_closed_loop(&p.config, 2).unwrap();
    assert_eq!(states(&again), states(&p.run(2)));
}

#[test]
fn draws_rotate_over_runs() {
    let mut cfg = base(TighteningMode::ScenarioOnly);
    cfg.scenario_draws = 3;
    let p = PreparedExperiment::prepare(&cfg).unwrap();
    assert_eq!(p.schedules.len(), 3);
    assert_eq!(p.run(4).draw, 1);
    assert_ne!(p.schedules[0].steps[0].nominal_input, p.schedules[1].steps[0].nominal_input);
}

#[test]
fn sweep_is_sorted_and_reproducible() {
    let spec = SweepSpec {
        schema_version: SCHEMA_VERSION,
        base: base(TighteningMode::ScenarioOnly),
        lambdas: vec![0.1, 0.0],
        methods: vec![
            MethodSpec { tightening: TighteningMode::GradientNorm { epsilon: 0.5 }, epsilon_source: None },
            MethodSpec { tightening: TighteningMode::ScenarioOnly, epsilon_source: None },
        ],
        epsilons: vec![],
    };
    let a = sweep(&spec.configs(), true).unwrap();
    let b = sweep(&spec.configs(), false).unwrap();
    assert_eq!(a.csv(), b.csv());
    let keys: Vec<(String, f64)> = a.rows.iter().map(|r| (r.method.clone(), r.lambda)).collect();
    assert_eq!(
        keys,
        vec![("grad".into(), 0.0), ("grad".into(), 0.1), ("tube".into(), 0.0), ("tube".into(), 0.1)]
    );
    assert_eq!(a.traces.len(), 4 * 20);
    assert!(a.csv().starts_with(CSV_HEADER));
    // Stronger mismatch pushes the plant toward the bound more often.
    assert!(a.rows[3].satisfaction <= a.rows[2].satisfaction);
    assert!(a.rows[0].satisfaction >= a.rows[2].satisfaction);
}

#[test]
fn epsilon_grid_expands_robust_methods_only() {
    let mut spec = SweepSpec {
        schema_version: SCHEMA_VERSION,
        base: base(TighteningMode::ScenarioOnly),
        lambdas: vec![0.0],
        methods: vec![
            MethodSpec { tightening: TighteningMode::GradientNorm { epsilon: 0.5 }, epsilon_source: None },
            MethodSpec { tightening: TighteningMode::ScenarioOnly, epsilon_source: None },
        ],
        epsilons: vec![0.1, 0.2, 0.3],
    };
    assert_eq!(spec.configs().len(), 4);
    spec.filter_methods(&["tube".into()]).unwrap();
    assert_eq!(spec.configs().len(), 1);
    assert!(spec.filter_methods(&["kdrc".into()]).unwrap_err().is_input());
}

#[test]
fn trace_files_round_trip() {
    let dir = std::env::temp_dir().join(format!("drmpc-sim-{}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    let mut cfg = base(TighteningMode::ScenarioOnly);
    cfg.runs = 3;
    let res = sweep(&[cfg], true).unwrap();
    res.write_csv(dir.join("r.csv")).unwrap();
    res.write_traces(dir.join("t.jsonl")).unwrap();
    let lines: Vec<Trace> = fs::read_to_string(dir.join("t.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[1].record, res.traces[1].record);
    assert_eq!(fs::read_to_string(dir.join("r.csv")).unwrap(), res.csv());
    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn presets_validate_and_round_trip() {
    for spec in [table1_spec(), small_sample_spec()] {
        spec.base.validate().unwrap();
        let text = serde_json::to_string_pretty(&spec).unwrap();
        let back: SweepSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }
    assert_eq!(table1_spec().configs().len(), 6);
    assert_eq!(table1_spec().base.scenarios.count().unwrap(), 35);
    let small = small_sample_spec().configs();
    assert!((small[1].resolve_epsilon().unwrap() - 1.541879).abs() < 1e-6);
}
