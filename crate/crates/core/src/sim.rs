//! Closed-loop Monte Carlo on the mismatched plant, satisfaction statistics
//! and parameter sweeps.
//!
//! With indirect feedback the nominal plan never sees the measurement, so a
//! controller configuration and scenario draw determine one nominal schedule
//! `(z_0(k), v_0(k))`. It is computed once and every Monte Carlo run replays
//! it with its own plant noise: `u(k) = K (x(k) - z_0(k)) + v_0(k)`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ambiguity::{mmd_radius_bound, scenario_count, verify_radius};
use crate::constraints::{builtin_constraints, ConstraintSpec, GridSpec, TighteningMode};
use crate::error::{check_dim, Error, Result};
use crate::kernel::KernelSpec;
use crate::mpc::{
    covariance_root, gaussian, mpc_step, ConstraintEntry, KdrcForm, LtiSystem, MpcConfig, MpcContext, StageAudit,
};
use crate::svm::{SvmConstraint, SvmModel};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub noise_cov: Vec<Vec<f64>>,
}

impl SystemSpec {
    pub fn double_integrator(noise_variance: f64) -> Self {
        SystemSpec {
            a: vec![vec![1.0, 1.0], vec![0.0, 1.0]],
            b: vec![vec![0.5], vec![1.0]],
            noise_cov: vec![vec![noise_variance, 0.0], vec![0.0, noise_variance]],
        }
    }

    pub fn build(&self) -> Result<LtiSystem> {
        LtiSystem::new(matrix("a", &self.a)?, matrix("b", &self.b)?, matrix("noise_cov", &self.noise_cov)?)
    }
}

impl Default for SystemSpec {
    fn default() -> Self {
        SystemSpec::double_integrator(0.1)
    }
}

fn matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, |v| v.len());
    if r == 0 || c == 0 || rows.iter().any(|v| v.len() != c) {
        return Err(Error::input(format!("matrix '{name}' must be a nonempty rectangular array")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

/// Constraint selected by name in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintChoice {
    /// `|x2| <= 3` as two affine branches.
    Lin,
    Exp,
    /// Learned constraint loaded from an SVM model file.
    Svm { model: PathBuf },
}

impl ConstraintChoice {
    pub fn resolve(&self) -> Result<Vec<ConstraintSpec>> {
        let b = builtin_constraints();
        Ok(match self {
            ConstraintChoice::Lin => b.lin.to_vec(),
            ConstraintChoice::Exp => vec![b.exp],
            ConstraintChoice::Svm { model } => {
                vec![Arc::new(SvmConstraint::new(SvmModel::load_json(model)?)?) as ConstraintSpec]
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioSizing {
    Count(usize),
    /// Smallest count meeting the scenario bound for `(alpha, beta, d)`.
    Bound { alpha: f64, beta: f64, d: usize },
}

impl ScenarioSizing {
    pub fn count(&self) -> Result<usize> {
        match *self {
            ScenarioSizing::Count(n) if n > 0 => Ok(n),
            ScenarioSizing::Count(_) => Err(Error::input("scenario count must be positive")),
            ScenarioSizing::Bound { alpha, beta, d } => scenario_count(alpha, beta, d),
        }
    }
}

/// Where the tightening radius comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonSource {
    Manual { epsilon: f64 },
    /// MMD concentration radius for the scenario count.
    LemmaBound { alpha: f64 },
    /// Concentration radius plus the estimated MMD between error samples
    /// of the nominal and the mismatched closed loop at absolute step `step`.
    Verify { alpha: f64, samples: usize, step: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    #[serde(default)]
    pub system: SystemSpec,
    #[serde(default = "default_q")]
    pub q: Vec<Vec<f64>>,
    #[serde(default = "default_r")]
    pub r: Vec<Vec<f64>>,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    pub constraints: Vec<ConstraintChoice>,
    #[serde(default = "default_sizing")]
    pub scenarios: ScenarioSizing,
    /// Independent offline scenario sets; runs use them round-robin.
    #[serde(default = "one")]
    pub scenario_draws: usize,
    #[serde(default)]
    pub seed: u64,
    pub initial_state: Vec<f64>,
    #[serde(default)]
    pub mismatch_lambda: f64,
    pub tightening: TighteningMode,
    #[serde(default)]
    pub epsilon_source: Option<EpsilonSource>,
    #[serde(default)]
    pub kdrc_form: KdrcForm,
    #[serde(default = "one")]
    pub runs: usize,
    #[serde(default = "default_steps")]
    pub sim_steps: usize,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}
fn default_q() -> Vec<Vec<f64>> {
    identity(2)
}
fn default_r() -> Vec<Vec<f64>> {
    identity(1)
}
fn default_horizon() -> usize {
    12
}
fn default_sizing() -> ScenarioSizing {
    ScenarioSizing::Bound {
        alpha: 0.85,
        beta: 0.15,
        d: 2,
    }
}
fn one() -> usize {
    1
}
fn default_steps() -> usize {
    30
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse a config file. Relative SVM model paths are taken relative to
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg: ExperimentConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
        cfg.anchor_paths(path);
        cfg.validate()?;
        Ok(cfg)
    }

    fn anchor_paths(&mut self, file: &Path) {
        let dir = file.parent().unwrap_or(Path::new(""));
        for c in &mut self.constraints {
            if let ConstraintChoice::Svm { model } = c {
                if model.is_relative() {
                    *model = dir.join(&*model);
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::input(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.runs == 0 {
            return Err(Error::input("runs must be at least 1"));
        }
        if self.sim_steps == 0 {
            return Err(Error::input("sim_steps must be at least 1"));
        }
        if self.scenario_draws == 0 {
            return Err(Error::input("scenario_draws must be at least 1"));
        }
        if !self.mismatch_lambda.is_finite() {
            return Err(Error::input("mismatch_lambda must be finite"));
        }
        self.scenarios.count()?;
        self.tightening.validate()?;
        let sys = self.system.build()?;
        check_dim(sys.state_dim(), self.initial_state.len())?;
        Ok(())
    }

    /// Radius used by the tightening, zero for the plain scenario mode.
    pub fn resolve_epsilon(&self) -> Result<f64> {
        if self.tightening == TighteningMode::ScenarioOnly {
            return Ok(0.0);
        }
        let kernel = match self.tightening {
            TighteningMode::KernelDrc { kernel, .. } => kernel,
            _ => KernelSpec::gaussian(1.0)?,
        };
        let n = self.scenarios.count()?;
        Ok(match self.epsilon_source {
            None => self.tightening.epsilon(),
            Some(EpsilonSource::Manual { epsilon }) => epsilon,
            Some(EpsilonSource::LemmaBound { alpha }) => mmd_radius_bound(n, alpha, kernel.sup_diagonal())?.epsilon,
            Some(EpsilonSource::Verify { alpha, samples, step }) => {
                let (nominal, shifted) = self.error_samples(samples, step)?;
                verify_radius(n, alpha, &nominal, &shifted, &kernel, self.seed)?.epsilon
            }
        })
    }

    /// Error samples at `step` under the nominal and the mismatched closed loop.
    fn error_samples(&self, samples: usize, step: usize) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        if samples < 2 || step == 0 {
            return Err(Error::input("verify needs at least two samples and a positive step"));
        }
        let mpc = self.mpc_config()?;
        let sys = &mpc.system;
        let phi = sys.closed_loop(&mpc.tube_gain);
        let shifted = &phi + DMatrix::identity(sys.state_dim(), sys.state_dim()) * self.mismatch_lambda;
        let root = covariance_root(&sys.noise_cov);
        let draw = |m: &DMatrix<f64>, stream: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(stream);
            (0..samples)
                .map(|_| {
                    let mut e = DVector::zeros(sys.state_dim());
                    for _ in 0..step {
                        e = m * e + gaussian(&root, &mut rng);
                    }
                    e.as_slice().to_vec()
                })
                .collect::<Vec<_>>()
        };
        Ok((draw(&phi, u64::MAX - 1), draw(&shifted, u64::MAX - 2)))
    }

    /// Controller configuration with the resolved radius.
    pub fn mpc_config(&self) -> Result<MpcConfig> {
        let system = self.system.build()?;
        let eps = if self.tightening == TighteningMode::ScenarioOnly {
            0.0
        } else {
            self.tightening.epsilon()
        };
        let mut entries = Vec::new();
        for c in &self.constraints {
            for spec in c.resolve()? {
                entries.push(ConstraintEntry::new(spec, self.tightening.with_epsilon(eps)));
            }
        }
        let mut cfg = MpcConfig::with_lqr(
            system,
            matrix("q", &self.q)?,
            matrix("r", &self.r)?,
            self.horizon,
            entries,
            self.scenarios.count()?,
            self.seed,
        )?;
        cfg.kdrc_form = self.kdrc_form;
        Ok(cfg)
    }

    /// Copy with the radius resolved and stored in the tightening mode.
    pub fn resolved(&self) -> Result<ExperimentConfig> {
        let eps = self.resolve_epsilon()?;
        let mut out = self.clone();
        out.tightening = self.tightening.with_epsilon(eps);
        out.epsilon_source = None;
        Ok(out)
    }

    fn scenario_seed(&self, draw: usize) -> u64 {
        self.seed.wrapping_add((draw as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    /// Key of everything the nominal schedule depends on; `mismatch_lambda`
    /// and `runs` are excluded.
    fn schedule_key(&self) -> String {
        let mut c = self.clone();
        c.mismatch_lambda = 0.0;
        c.runs = 1;
        c.output = None;
        serde_json::to_string(&c).expect("config serializes")
    }
}

/// One MPC solve of the nominal schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleStep {
    pub nominal_state: Vec<f64>,
    pub nominal_input: Vec<f64>,
    pub infeasible: bool,
    pub solve_seconds: f64,
    pub kkt_residual: f64,
    pub drc_audits: Vec<StageAudit>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NominalSchedule {
    pub draw: usize,
    pub steps: Vec<ScheduleStep>,
}

impl NominalSchedule {
    pub fn infeasible_count(&self) -> usize {
        self.steps.iter().filter(|s| s.infeasible).count()
    }
}

/// Run the MPC forward along its own nominal prediction for `sim_steps`.
pub fn nominal_schedule(cfg: &ExperimentConfig, draw: usize) -> Result<NominalSchedule> {
    let resolved = cfg.resolved()?;
    let mut mpc = resolved.mpc_config()?;
    mpc.seed = cfg.scenario_seed(draw);
    let scen = mpc.scenarios(cfg.sim_steps + cfg.horizon)?;
    let ctx = MpcContext::new(mpc, scen)?;
    let mut plan = None;
    let mut steps = Vec::with_capacity(cfg.sim_steps);
    let mut z = cfg.initial_state.clone();
    for k in 0..cfg.sim_steps {
        let out = mpc_step(&ctx, plan.as_ref(), &z, k)?;
        z = out.plan.states[1].clone();
        steps.push(ScheduleStep {
            nominal_state: out.plan.states[0].clone(),
            nominal_input: out.plan.inputs[0].clone(),
            infeasible: out.infeasible,
            solve_seconds: out.solve_seconds,
            kkt_residual: out.kkt_residual,
            drc_audits: out.drc_audits,
        });
        plan = Some(out.plan);
    }
    Ok(NominalSchedule { draw, steps })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Plant state after the step, `x(k+1)`.
    pub state: Vec<f64>,
    pub input: Vec<f64>,
    /// `z_0(k)`.
    pub nominal: Vec<f64>,
    /// `C(x(k+1), 0) <= 0` per constraint.
    pub satisfied: Vec<bool>,
    pub infeasible: bool,
    pub solve_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopRecord {
    pub run: usize,
    pub draw: usize,
    pub steps: Vec<StepRecord>,
    /// `sum x'Qx + u'Ru` along the realized trajectory.
    pub cost: f64,
}

impl ClosedLoopRecord {
    pub fn satisfied_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.satisfied.iter().all(|f| *f)).count()
    }
}

/// A configuration with its nominal schedules computed.
#[derive(Debug, Clone)]
pub struct PreparedExperiment {
    pub config: ExperimentConfig,
    pub epsilon: f64,
    pub schedules: Arc<Vec<NominalSchedule>>,
    mpc: Arc<MpcConfig>,
}

impl PreparedExperiment {
    pub fn prepare(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let resolved = config.resolved()?;
        let schedules = (0..config.scenario_draws)
            .into_par_iter()
            .map(|d| nominal_schedule(&resolved, d))
            .collect::<Result<Vec<_>>>()?;
        PreparedExperiment::with_schedules(config, Arc::new(schedules))
    }

    fn with_schedules(config: &ExperimentConfig, schedules: Arc<Vec<NominalSchedule>>) -> Result<Self> {
        let resolved = config.resolved()?;
        Ok(PreparedExperiment {
            epsilon: resolved.tightening.epsilon(),
            mpc: Arc::new(resolved.mpc_config()?),
            config: resolved,
            schedules,
        })
    }

    /// Replay the schedule of draw `run mod draws` on the mismatched plant.
    pub fn run(&self, run: usize) -> ClosedLoopRecord {
        let cfg = &self.config;
        let mpc = &self.mpc;
        let n = mpc.system.state_dim();
        let a_true = &mpc.system.a + DMatrix::identity(n, n) * cfg.mismatch_lambda;
        let root = covariance_root(&mpc.system.noise_cov);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(run as u64 + 1);
        let draw = run % self.schedules.len();
        let schedule = &self.schedules[draw];
        let zero = vec![0.0; n];
        let mut x = DVector::from_column_slice(&cfg.initial_state);
        let mut cost = 0.0;
        let mut steps = Vec::with_capacity(schedule.steps.len());
        for s in &schedule.steps {
            let z = DVector::from_column_slice(&s.nominal_state);
            let u = &mpc.tube_gain * (&x - &z) + DVector::from_column_slice(&s.nominal_input);
            cost += x.dot(&(&mpc.q * &x)) + u.dot(&(&mpc.r * &u));
            x = &a_true * &x + &mpc.system.b * &u + gaussian(&root, &mut rng);
            let satisfied = mpc
                .constraints
                .iter()
                .map(|e| e.constraint.value(x.as_slice(), &zero) <= 0.0)
                .collect();
            steps.push(StepRecord {
                state: x.as_slice().to_vec(),
                input: u.as_slice().to_vec(),
                nominal: s.nominal_state.clone(),
                satisfied,
                infeasible: s.infeasible,
                solve_seconds: s.solve_seconds,
            });
        }
        ClosedLoopRecord { run, draw, steps, cost }
    }

    pub fn run_all(&self) -> Vec<ClosedLoopRecord> {
        (0..self.config.runs).into_par_iter().map(|i| self.run(i)).collect()
    }

    /// Share of MPC solves that needed the soft fallback.
    pub fn infeasibility_rate(&self) -> f64 {
        let total: usize = self.schedules.iter().map(|s| s.steps.len()).sum();
        let bad: usize = self.schedules.iter().map(|s| s.infeasible_count()).sum();
        bad as f64 / total.max(1) as f64
    }
}

/// Prepare `config` and simulate run `run_index`.
pub fn run_closed_loop(config: &ExperimentConfig, run_index: usize) -> Result<ClosedLoopRecord> {
    Ok(PreparedExperiment::prepare(config)?.run(run_index))
}

/// Fraction of all `(run, step)` pairs at which every constraint holds.
pub fn empirical_satisfaction(records: &[ClosedLoopRecord]) -> Result<f64> {
    let total: usize = records.iter().map(|r| r.steps.len()).sum();
    if total == 0 {
        return Err(Error::input("no closed-loop steps to evaluate"));
    }
    let ok: usize = records.iter().map(|r| r.satisfied_steps()).sum();
    Ok(ok as f64 / total as f64)
}

/// Fraction of runs without a single violation.
pub fn per_run_minimum(records: &[ClosedLoopRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::input("no closed-loop runs to evaluate"));
    }
    let clean = records.iter().filter(|r| r.satisfied_steps() == r.steps.len()).count();
    Ok(clean as f64 / records.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub lambda: f64,
    pub epsilon: f64,
    pub n_s: usize,
    pub satisfaction: f64,
    pub per_run_min: f64,
    pub mean_cost: f64,
    pub infeasibility_rate: f64,
    pub runs: usize,
}

pub const CSV_HEADER: &str = "method,lambda,epsilon,n_s,satisfaction,per_run_min,mean_cost,infeasibility_rate,runs";

impl SweepRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.method,
            self.lambda,
            self.epsilon,
            self.n_s,
            self.satisfaction,
            self.per_run_min,
            self.mean_cost,
            self.infeasibility_rate,
            self.runs
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trace {
    pub schema_version: u32,
    pub method: String,
    pub lambda: f64,
    pub epsilon: f64,
    pub run: usize,
    pub record: ClosedLoopRecord,
}

#[derive(Debug, Default)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub traces: Vec<Trace>,
}

impl SweepResult {
    pub fn csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.csv());
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.csv())?;
        Ok(())
    }

    pub fn write_traces(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        for t in &self.traces {
            serde_json::to_writer(&mut f, t)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Run every config; schedules are shared between configs that differ only
/// in `mismatch_lambda` or `runs`. Rows come back sorted by
/// `(method, lambda, epsilon, n_s)`.
pub fn sweep(configs: &[ExperimentConfig], keep_traces: bool) -> Result<SweepResult> {
    let mut schedules: BTreeMap<String, Arc<Vec<NominalSchedule>>> = BTreeMap::new();
    let mut resolved = Vec::with_capacity(configs.len());
    for c in configs {
        c.validate()?;
        resolved.push(c.resolved()?);
    }
    let keys: Vec<String> = resolved.iter().map(|c| c.schedule_key()).collect();
    let mut pending: Vec<(String, &ExperimentConfig, usize)> = Vec::new();
    for (c, k) in resolved.iter().zip(&keys) {
        if !schedules.contains_key(k) && !pending.iter().any(|(p, _, _)| p == k) {
            for d in 0..c.scenario_draws {
                pending.push((k.clone(), c, d));
            }
        }
        schedules.entry(k.clone()).or_default();
    }
    let computed = pending
        .par_iter()
        .map(|(k, c, d)| nominal_schedule(c, *d).map(|s| (k.clone(), s)))
        .collect::<Result<Vec<_>>>()?;
    let mut grouped: BTreeMap<String, Vec<NominalSchedule>> = BTreeMap::new();
    for (k, s) in computed {
        grouped.entry(k).or_default().push(s);
    }
    for (k, v) in grouped {
        schedules.insert(k, Arc::new(v));
    }

    let mut result = SweepResult::default();
    for (c, k) in resolved.iter().zip(&keys) {
        let prepared = PreparedExperiment::with_schedules(c, Arc::clone(&schedules[k]))?;
        let records = prepared.run_all();
        let row = SweepRow {
            method: c.tightening.name().to_string(),
            lambda: c.mismatch_lambda,
            epsilon: prepared.epsilon,
            n_s: c.scenarios.count()?,
            satisfaction: empirical_satisfaction(&records)?,
            per_run_min: per_run_minimum(&records)?,
            mean_cost: records.iter().map(|r| r.cost).sum::<f64>() / records.len() as f64,
            infeasibility_rate: prepared.infeasibility_rate(),
            runs: records.len(),
        };
        if keep_traces {
            for r in records {
                result.traces.push(Trace {
                    schema_version: SCHEMA_VERSION,
                    method: row.method.clone(),
                    lambda: row.lambda,
                    epsilon: row.epsilon,
                    run: r.run,
                    record: r,
                });
            }
        }
        result.rows.push(row);
    }
    let mut idx: Vec<usize> = (0..result.rows.len()).collect();
    idx.sort_by(|&a, &b| {
        let (ra, rb) = (&result.rows[a], &result.rows[b]);
        ra.method
            .cmp(&rb.method)
            .then(ra.lambda.total_cmp(&rb.lambda))
            .then(ra.epsilon.total_cmp(&rb.epsilon))
            .then(ra.n_s.cmp(&rb.n_s))
    });
    let rows = idx.iter().map(|&i| result.rows[i].clone()).collect();
    result.rows = rows;
    let mut traces = std::mem::take(&mut result.traces);
    traces.sort_by(|a, b| {
        a.method
            .cmp(&b.method)
            .then(a.lambda.total_cmp(&b.lambda))
            .then(a.epsilon.total_cmp(&b.epsilon))
            .then(a.run.cmp(&b.run))
    });
    result.traces = traces;
    Ok(result)
}

/// A named method of a sweep: tightening plus radius source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub tightening: TighteningMode,
    #[serde(default)]
    pub epsilon_source: Option<EpsilonSource>,
}

/// A base experiment crossed with mismatch values and methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub base: ExperimentConfig,
    pub lambdas: Vec<f64>,
    pub methods: Vec<MethodSpec>,
    /// Manual radii applied to every non-scenario method; empty keeps the
    /// methods' own radius.
    #[serde(default)]
    pub epsilons: Vec<f64>,
}

impl SweepSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut spec: SweepSpec = serde_json::from_str(&fs::read_to_string(path)?)?;
        spec.base.anchor_paths(path);
        spec.base.validate()?;
        Ok(spec)
    }

    /// Keep only methods whose short name is listed.
    pub fn filter_methods(&mut self, names: &[String]) -> Result<()> {
        for n in names {
            if !self.methods.iter().any(|m| m.tightening.name() == n) {
                return Err(Error::input(format!("sweep has no method named '{n}'")));
            }
        }
        self.methods.retain(|m| names.iter().any(|n| n == m.tightening.name()));
        Ok(())
    }

    pub fn configs(&self) -> Vec<ExperimentConfig> {
        let mut out = Vec::new();
        for m in &self.methods {
            let radii: Vec<Option<f64>> =
                if self.epsilons.is_empty() || m.tightening == TighteningMode::ScenarioOnly {
                    vec![None]
                } else {
                    self.epsilons.iter().map(|e| Some(*e)).collect()
                };
            for eps in radii {
                for &lambda in &self.lambdas {
                    let mut c = self.base.clone();
                    c.tightening = m.tightening;
                    c.epsilon_source = m.epsilon_source;
                    if let Some(e) = eps {
                        c.epsilon_source = Some(EpsilonSource::Manual { epsilon: e });
                    }
                    c.mismatch_lambda = lambda;
                    out.push(c);
                }
            }
        }
        out
    }
}

/// Kernel DRC tightening with a Gaussian kernel.
pub fn kdrc_mode(epsilon: f64, sigma: f64, grid: GridSpec) -> TighteningMode {
    TighteningMode::KernelDrc {
        epsilon,
        kernel: KernelSpec {
            family: crate::kernel::KernelFamily::Gaussian,
            sigma,
        },
        grid,
    }
}

fn padded_grid(padding: f64) -> GridSpec {
    GridSpec {
        points_per_dimension: 5,
        margin: 0.0,
        padding,
    }
}

/// Double integrator with `|x2| <= 3`, model mismatch 0.075 and 0.1, plain
/// scenario tube against gradient and kernel DRC tightening.
pub fn table1_spec() -> SweepSpec {
    SweepSpec {
        schema_version: SCHEMA_VERSION,
        base: ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            system: SystemSpec::double_integrator(0.1),
            q: default_q(),
            r: default_r(),
            horizon: 12,
            constraints: vec![ConstraintChoice::Lin],
            scenarios: default_sizing(),
            scenario_draws: 1,
            seed: 1,
            initial_state: vec![-15.0, 0.0],
            mismatch_lambda: 0.0,
            tightening: TighteningMode::ScenarioOnly,
            epsilon_source: None,
            kdrc_form: KdrcForm::Nested,
            runs: 1000,
            sim_steps: 30,
            output: None,
        },
        lambdas: vec![0.075, 0.1],
        methods: vec![
            MethodSpec {
                tightening: TighteningMode::ScenarioOnly,
                epsilon_source: None,
            },
            MethodSpec {
                tightening: TighteningMode::GradientNorm { epsilon: 1.75 },
                epsilon_source: None,
            },
            MethodSpec {
                tightening: kdrc_mode(1.0, 1.0, padded_grid(1.75)),
                epsilon_source: None,
            },
        ],
        epsilons: Vec::new(),
    }
}

/// Five scenarios, noise `0.2 I`, no mismatch: scenario approach against
/// kernel DRC with the concentration-bound radius.
pub fn small_sample_spec() -> SweepSpec {
    let mut base = table1_spec().base;
    base.system = SystemSpec::double_integrator(0.2);
    base.scenarios = ScenarioSizing::Count(5);
    base.scenario_draws = 10;
    base.initial_state = vec![-30.0, 0.0];
    SweepSpec {
        schema_version: SCHEMA_VERSION,
        base,
        lambdas: vec![0.0],
        methods: vec![
            MethodSpec {
                tightening: TighteningMode::ScenarioOnly,
                epsilon_source: None,
            },
            MethodSpec {
                tightening: kdrc_mode(0.0, 1.0, padded_grid(1.0)),
                epsilon_source: Some(EpsilonSource::LemmaBound { alpha: 0.05 }),
            },
        ],
        epsilons: Vec::new(),
    }
}

#[cfg(test)]
mod tests;
