//! Tube MPC with indirect feedback on a linear plant.
//!
//! The nominal trajectory `z` is planned by a condensed NLP over the nominal
//! inputs `v`; the applied input is `u = K (x - z_0) + v_0`. Uncertain
//! constraints are imposed on every predicted stage, tightened with the
//! error scenarios of that stage.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::constraints::{
    build_kernel_drc_block, ConstraintSpec, DrcAudit, DrcValue, KernelDrcBlock, ScenarioSet, TighteningMode, INNER_ACCEPT,
};
use crate::error::{check_dim, Error, Result};
use crate::nlp::{self, NlpProblem, Oracle, SolveStatus, SolverOptions};

/// `x(k+1) = A x(k) + B u(k) + w(k)`, `w ~ N(0, noise_cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub noise_cov: DMatrix<f64>,
}

impl LtiSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, noise_cov: DMatrix<f64>) -> Result<Self> {
        let sys = LtiSystem { a, b, noise_cov };
        sys.validate()?;
        Ok(sys)
    }

    /// `A = [[1, 1], [0, 1]]`, `B = [0.5; 1]`, isotropic noise.
    pub fn double_integrator(noise_variance: f64) -> Result<Self> {
        LtiSystem::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
            DMatrix::from_row_slice(2, 1, &[0.5, 1.0]),
            DMatrix::identity(2, 2) * noise_variance,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.a.nrows();
        check_dim(n, self.a.ncols())?;
        check_dim(n, self.b.nrows())?;
        check_dim(n, self.noise_cov.nrows())?;
        check_dim(n, self.noise_cov.ncols())?;
        if self.b.ncols() == 0 || n == 0 {
            return Err(Error::input("system needs at least one state and one input"));
        }
        check_psd("noise covariance", &self.noise_cov)
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    /// `A + B K`.
    pub fn closed_loop(&self, k: &DMatrix<f64>) -> DMatrix<f64> {
        &self.a + &self.b * k
    }
}

fn check_psd(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::input(format!("{name} must be square")));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return Err(Error::input(format!("{name} must be symmetric")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::input(format!("{name} has non-finite entries")));
    }
    let min = m.clone().symmetric_eigenvalues().min();
    if min < -1e-12 * scale {
        return Err(Error::input(format!("{name} must be positive semidefinite (eigenvalue {min:.3e})")));
    }
    Ok(())
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.clone().complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

const RICCATI_TOLERANCE: f64 = 1e-10;
const RICCATI_MAX_ITERATIONS: usize = 100_000;

/// Infinite-horizon LQR gain `K = -(R + B'PB)^{-1} B'PA`, with `P` from the
/// discrete Riccati equation by fixed-point iteration.
pub fn lqr_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    check_dim(n, a.ncols())?;
    check_dim(n, b.nrows())?;
    check_dim(n, q.nrows())?;
    check_dim(b.ncols(), r.nrows())?;
    check_psd("Q", q)?;
    check_psd("R", r)?;
    r.clone()
        .cholesky()
        .ok_or_else(|| Error::input("R must be positive definite"))?;

    let gain = |p: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let s = r + b.transpose() * p * b;
        let chol = s.cholesky().ok_or_else(|| Error::Solver("R + B'PB lost definiteness".into()))?;
        Ok(-chol.solve(&(b.transpose() * p * a)))
    };
    let mut p = q.clone();
    let mut residual = f64::INFINITY;
    for it in 0..RICCATI_MAX_ITERATIONS {
        let k = gain(&p)?;
        // Joseph form of the Riccati update
        let acl = a + b * &k;
        let next = q + k.transpose() * r * &k + acl.transpose() * &p * &acl;
        let next = (&next + next.transpose()) * 0.5;
        residual = (&next - &p).amax();
        p = next;
        if !residual.is_finite() {
            break;
        }
        if residual < RICCATI_TOLERANCE {
            let k = gain(&p)?;
            let rho = spectral_radius(&(a + b * &k));
            if rho >= 1.0 {
                return Err(Error::Solver(format!("LQR gain is not stabilizing (spectral radius {rho:.6})")));
            }
            return Ok(k);
        }
        if it + 1 == RICCATI_MAX_ITERATIONS {
            break;
        }
    }
    Err(Error::Convergence {
        what: "riccati iteration",
        iterations: RICCATI_MAX_ITERATIONS,
        residual,
    })
}

/// Error scenarios `e_i(t)` for `t = 1..=steps`, driven by i.i.d. Gaussian
/// disturbances through `e(t+1) = (A + BK) e(t) + w(t)`, `e(0) = 0`.
pub fn propagate_error_scenarios(
    system: &LtiSystem,
    k: &DMatrix<f64>,
    count: usize,
    steps: usize,
    seed: u64,
) -> Result<ScenarioSet> {
    system.validate()?;
    check_dim(system.input_dim(), k.nrows())?;
    check_dim(system.state_dim(), k.ncols())?;
    if count == 0 || steps == 0 {
        return Err(Error::input("scenario count and horizon must be positive"));
    }
    let phi = system.closed_loop(k);
    let root = covariance_root(&system.noise_cov);
    let n = system.state_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut e = vec![DVector::<f64>::zeros(n); count];
    let mut per_step = Vec::with_capacity(steps);
    for _ in 0..steps {
        for ei in e.iter_mut() {
            let w = gaussian(&root, &mut rng);
            *ei = &phi * &*ei + w;
        }
        per_step.push(e.iter().map(|v| v.as_slice().to_vec()).collect());
    }
    ScenarioSet::new(per_step)
}

/// `L` with `L L' = cov`, from the symmetric eigendecomposition so that
/// singular covariances are fine.
pub(crate) fn covariance_root(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = cov.clone().symmetric_eigen();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d
}

pub(crate) fn gaussian(root: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let z = DVector::from_fn(root.ncols(), |_, _| StandardNormal.sample(rng));
    root * z
}

/// How a kernel DRC constraint enters the MPC program.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdrcForm {
    /// One row per stage holding the block's value function.
    #[default]
    Nested,
    /// The block's auxiliaries `(alpha, f0, t)` join the decision vector.
    Joint,
}

#[derive(Debug, Clone)]
pub struct ConstraintEntry {
    pub constraint: ConstraintSpec,
    pub mode: TighteningMode,
}

impl ConstraintEntry {
    pub fn new(constraint: ConstraintSpec, mode: TighteningMode) -> Self {
        ConstraintEntry { constraint, mode }
    }
}

#[derive(Debug, Clone)]
pub struct MpcConfig {
    pub system: LtiSystem,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub tube_gain: DMatrix<f64>,
    pub horizon: usize,
    pub constraints: Vec<ConstraintEntry>,
    pub scenario_count: usize,
    pub seed: u64,
    pub kdrc_form: KdrcForm,
    pub tolerance: f64,
    pub max_iterations: usize,
}

/// Penalty on the shared slack of the soft fallback program.
pub const SOFT_PENALTY: f64 = 1e6;

impl MpcConfig {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        system: LtiSystem,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        tube_gain: DMatrix<f64>,
        horizon: usize,
        constraints: Vec<ConstraintEntry>,
        scenario_count: usize,
        seed: u64,
    ) -> Result<Self> {
        let cfg = MpcConfig {
            system,
            q,
            r,
            tube_gain,
            horizon,
            constraints,
            scenario_count,
            seed,
            kdrc_form: KdrcForm::Nested,
            tolerance: 1e-7,
            max_iterations: 200,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Same as [`MpcConfig::new`] with the LQR tube gain for `(A, B, Q, R)`.
    pub fn with_lqr(
        system: LtiSystem,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        horizon: usize,
        constraints: Vec<ConstraintEntry>,
        scenario_count: usize,
        seed: u64,
    ) -> Result<Self> {
        let k = lqr_gain(&system.a, &system.b, &q, &r)?;
        MpcConfig::new(system, q, r, k, horizon, constraints, scenario_count, seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        let (n, m) = (self.system.state_dim(), self.system.input_dim());
        check_dim(n, self.q.nrows())?;
        check_dim(m, self.r.nrows())?;
        check_psd("Q", &self.q)?;
        check_psd("R", &self.r)?;
        if self.r.clone().cholesky().is_none() {
            return Err(Error::input("R must be positive definite"));
        }
        check_dim(m, self.tube_gain.nrows())?;
        check_dim(n, self.tube_gain.ncols())?;
        let rho = spectral_radius(&self.system.closed_loop(&self.tube_gain));
        if rho >= 1.0 {
            return Err(Error::input(format!("A + BK is not Schur stable (spectral radius {rho:.6})")));
        }
        if self.horizon == 0 {
            return Err(Error::input("horizon must be positive"));
        }
        if self.scenario_count == 0 {
            return Err(Error::input("scenario count must be positive"));
        }
        if !(self.tolerance > 0.0) || self.max_iterations == 0 {
            return Err(Error::input("solver tolerance and iteration cap must be positive"));
        }
        for e in &self.constraints {
            check_dim(n, e.constraint.dim())?;
            e.mode.validate()?;
            if matches!(e.mode, TighteningMode::NativeRkhsNorm { .. }) && e.constraint.native_rkhs_norm().is_none() {
                return Err(Error::input(format!(
                    "constraint '{}' has no native RKHS norm",
                    e.constraint.label()
                )));
            }
        }
        Ok(())
    }

    /// Offline error scenarios covering `steps` absolute time steps.
    pub fn scenarios(&self, steps: usize) -> Result<ScenarioSet> {
        propagate_error_scenarios(&self.system, &self.tube_gain, self.scenario_count, steps, self.seed)
    }
}

/// Prediction matrices: `z_t = phi_t z_0 + gamma_t v`.
#[derive(Debug)]
struct Condensed {
    phi: Vec<DMatrix<f64>>,
    gamma: Vec<DMatrix<f64>>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    /// Exact Hessian of the objective in `v`.
    hessian: DMatrix<f64>,
}

impl Condensed {
    fn new(cfg: &MpcConfig) -> Self {
        let (a, b) = (&cfg.system.a, &cfg.system.b);
        let (n, m, t_max) = (cfg.system.state_dim(), cfg.system.input_dim(), cfg.horizon);
        let mut phi = vec![DMatrix::identity(n, n)];
        let mut gamma = vec![DMatrix::zeros(n, m * t_max)];
        for t in 1..=t_max {
            phi.push(a * &phi[t - 1]);
            let mut g = a * &gamma[t - 1];
            g.view_mut((0, (t - 1) * m), (n, m)).copy_from(b);
            gamma.push(g);
        }
        let mut hessian = DMatrix::zeros(m * t_max, m * t_max);
        for g in &gamma {
            hessian += g.transpose() * &cfg.q * g * 2.0;
        }
        for t in 0..t_max {
            let mut blk = hessian.view_mut((t * m, t * m), (m, m));
            blk += &cfg.r * 2.0;
        }
        Condensed {
            phi,
            gamma,
            q: cfg.q.clone(),
            r: cfg.r.clone(),
            hessian,
        }
    }

    fn horizon(&self) -> usize {
        self.phi.len() - 1
    }

    fn state(&self, t: usize, z0: &DVector<f64>, v: &[f64]) -> DVector<f64> {
        let vv = DVector::from_column_slice(v);
        &self.phi[t] * z0 + &self.gamma[t] * vv
    }

    fn objective(&self, z0: &DVector<f64>, v: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let m = self.r.nrows();
        let mut f = 0.0;
        let mut g = DVector::zeros(v.len());
        for t in 0..=self.horizon() {
            let z = self.state(t, z0, v);
            let qz = &self.q * &z;
            f += z.dot(&qz);
            g += self.gamma[t].transpose() * qz * 2.0;
        }
        for t in 0..self.horizon() {
            let vt = DVector::from_column_slice(&v[t * m..(t + 1) * m]);
            let rv = &self.r * &vt;
            f += vt.dot(&rv);
            for i in 0..m {
                g[t * m + i] += 2.0 * rv[i];
            }
        }
        if let Some(out) = grad {
            out[..v.len()].copy_from_slice(g.as_slice());
        }
        f
    }

    /// Map an `x`-gradient at stage `t` to the `v`-gradient.
    fn pull_back(&self, t: usize, gx: &[f64], out: &mut [f64]) {
        let g = DVector::from_column_slice(gx);
        let gv = self.gamma[t].transpose() * g;
        for (o, val) in out.iter_mut().zip(gv.iter()) {
            *o += val;
        }
    }
}

/// Kernel DRC data of one (absolute step, constraint) pair.
#[derive(Debug)]
struct StageDrc {
    block: KernelDrcBlock,
    audit_points: Vec<Vec<f64>>,
    /// Inner solution at `x = 0`, reused by translation for affine constraints.
    affine_base: Option<DrcValue>,
    warm: Mutex<Option<Vec<f64>>>,
    last: Mutex<Option<(Vec<f64>, DrcValue)>>,
}

impl StageDrc {
    fn evaluate(&self, x: &[f64]) -> Result<DrcValue> {
        if let Some(base) = &self.affine_base {
            let c = &self.block.constraint;
            let zero = vec![0.0; x.len()];
            let shift = c.value(x, &zero) - c.value(&zero, &zero);
            let mut aux = base.aux.clone();
            aux[self.block.scenario_count()] += shift;
            return Ok(DrcValue {
                value: base.value + shift,
                grad_x: c.grad_x(x, &zero),
                aux,
                status: base.status,
                kkt_residual: base.kkt_residual,
            });
        }
        if let Some((px, val)) = &*self.last.lock().expect("poisoned") {
            if px.as_slice() == x {
                return Ok(val.clone());
            }
        }
        let warm = self.warm.lock().expect("poisoned").clone();
        let mut val = self.block.tightening(x, warm.as_deref())?;
        if val.status != SolveStatus::Optimal && val.kkt_residual > INNER_ACCEPT && warm.is_some() {
            val = self.block.tightening(x, None)?;
        }
        *self.warm.lock().expect("poisoned") = Some(val.aux.clone());
        *self.last.lock().expect("poisoned") = Some((x.to_vec(), val.clone()));
        Ok(val)
    }
}

/// Immutable controller data plus caches shared by successive MPC solves.
#[derive(Debug)]
pub struct MpcContext {
    pub config: Arc<MpcConfig>,
    pub scenarios: Arc<ScenarioSet>,
    condensed: Arc<Condensed>,
    drc: Mutex<HashMap<(usize, usize), Arc<StageDrc>>>,
}

impl MpcContext {
    /// `scenarios.step(s)` holds the error samples at absolute time `s + 1`.
    pub fn new(config: MpcConfig, scenarios: ScenarioSet) -> Result<Self> {
        config.validate()?;
        scenarios.validate()?;
        check_dim(config.system.state_dim(), scenarios.step(0)[0].len())?;
        let condensed = Arc::new(Condensed::new(&config));
        Ok(MpcContext {
            config: Arc::new(config),
            scenarios: Arc::new(scenarios),
            condensed,
            drc: Mutex::new(HashMap::new()),
        })
    }

    /// Scenario list of stage `t` (1-based) of the problem solved at time `k`.
    fn stage_scenarios(&self, k: usize, t: usize) -> &[Vec<f64>] {
        self.scenarios.step(k + t - 1)
    }

    fn stage_drc(&self, abs_step: usize, ci: usize) -> Result<Arc<StageDrc>> {
        if let Some(s) = self.drc.lock().expect("poisoned").get(&(abs_step, ci)) {
            return Ok(Arc::clone(s));
        }
        let entry = &self.config.constraints[ci];
        let TighteningMode::KernelDrc { epsilon, kernel, grid } = entry.mode else {
            return Err(Error::input("stage is not in kernel DRC mode"));
        };
        let scen = self.scenarios.step(abs_step);
        let block = build_kernel_drc_block(
            Arc::clone(&entry.constraint),
            scen,
            &grid.support(scen),
            epsilon,
            kernel,
        )?
        .with_certification(grid.audit(scen))?;
        let affine_base = if entry.constraint.affine_in_x() {
            Some(block.tightening(&vec![0.0; entry.constraint.dim()], None)?)
        } else {
            None
        };
        let stage = Arc::new(StageDrc {
            audit_points: block.certify.clone(),
            block,
            affine_base,
            warm: Mutex::new(None),
            last: Mutex::new(None),
        });
        self.drc
            .lock()
            .expect("poisoned")
            .insert((abs_step, ci), Arc::clone(&stage));
        Ok(stage)
    }
}

/// Where each auxiliary block lives in the decision vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AuxKind {
    GradientBound,
    JointDrc,
}

#[derive(Debug, Clone)]
struct AuxSlot {
    stage: usize,
    constraint: usize,
    offset: usize,
    len: usize,
    kind: AuxKind,
}

/// A condensed MPC program with its variable layout.
#[derive(Debug)]
pub struct MpcProgram {
    pub problem: NlpProblem,
    /// Number of nominal-input variables; auxiliaries follow.
    pub input_len: usize,
    aux: Vec<AuxSlot>,
    z_init: DVector<f64>,
    time: usize,
}

const GRADIENT_NORM_SMOOTHING: f64 = 1e-16;

/// Assemble the tightened program at absolute time `time`.
pub fn build_mpc_program(ctx: &MpcContext, z_init: &[f64], time: usize) -> Result<MpcProgram> {
    let cfg = &ctx.config;
    let (n, m, horizon) = (cfg.system.state_dim(), cfg.system.input_dim(), cfg.horizon);
    check_dim(n, z_init.len())?;
    if ctx.scenarios.steps() < time + horizon {
        return Err(Error::input(format!(
            "scenario set covers {} steps, need {}",
            ctx.scenarios.steps(),
            time + horizon
        )));
    }
    let cond = Arc::clone(&ctx.condensed);
    let z0 = DVector::from_column_slice(z_init);
    let input_len = m * horizon;

    let mut aux = Vec::new();
    let mut total = input_len;
    for t in 1..=horizon {
        for (ci, e) in cfg.constraints.iter().enumerate() {
            let (kind, len) = match e.mode {
                TighteningMode::GradientNorm { .. } => (AuxKind::GradientBound, 1),
                TighteningMode::KernelDrc { .. } if cfg.kdrc_form == KdrcForm::Joint => {
                    (AuxKind::JointDrc, ctx.stage_scenarios(time, t).len() + 2)
                }
                _ => continue,
            };
            aux.push(AuxSlot {
                stage: t,
                constraint: ci,
                offset: total,
                len,
                kind,
            });
            total += len;
        }
    }

    let obj_cond = Arc::clone(&cond);
    let obj_z0 = z0.clone();
    let objective: Oracle = Box::new(move |w, g| obj_cond.objective(&obj_z0, &w[..input_len], g));
    let mut problem = NlpProblem::new(total, objective, vec![0.0; total]);
    let mut hess = DMatrix::identity(total, total);
    hess.view_mut((0, 0), (input_len, input_len)).copy_from(&cond.hessian);
    problem.initial_hessian = Some(hess);

    let slot_of = |t: usize, ci: usize| aux.iter().find(|s| s.stage == t && s.constraint == ci).cloned();

    for t in 1..=horizon {
        let scen = ctx.stage_scenarios(time, t);
        for (ci, e) in cfg.constraints.iter().enumerate() {
            let c = Arc::clone(&e.constraint);
            match e.mode {
                TighteningMode::ScenarioOnly | TighteningMode::NativeRkhsNorm { .. } => {
                    let extra = match e.mode {
                        TighteningMode::NativeRkhsNorm { epsilon } => {
                            epsilon * c.native_rkhs_norm().expect("checked in validate")
                        }
                        _ => 0.0,
                    };
                    for xi in scen {
                        let (c, cond, z0, xi) = (Arc::clone(&c), Arc::clone(&cond), z0.clone(), xi.clone());
                        problem = problem.constraint(Box::new(move |w, g| {
                            let z = cond.state(t, &z0, &w[..input_len]);
                            if let Some(g) = g {
                                cond.pull_back(t, &c.grad_x(z.as_slice(), &xi), &mut g[..input_len]);
                            }
                            c.value(z.as_slice(), &xi) + extra
                        }));
                    }
                }
                TighteningMode::GradientNorm { epsilon } => {
                    let s_idx = slot_of(t, ci).expect("slot allocated").offset;
                    for xi in scen {
                        let (c, cond, z0, xi) = (Arc::clone(&c), Arc::clone(&cond), z0.clone(), xi.clone());
                        problem = problem.constraint(Box::new(move |w, g| {
                            let z = cond.state(t, &z0, &w[..input_len]);
                            if let Some(g) = g {
                                cond.pull_back(t, &c.grad_x(z.as_slice(), &xi), &mut g[..input_len]);
                                g[s_idx] = epsilon;
                            }
                            c.value(z.as_slice(), &xi) + epsilon * w[s_idx]
                        }));
                    }
                    for xi in scen {
                        let (c, cond, z0, xi) = (Arc::clone(&c), Arc::clone(&cond), z0.clone(), xi.clone());
                        problem = problem.constraint(Box::new(move |w, g| {
                            let z = cond.state(t, &z0, &w[..input_len]);
                            let gxi = c.grad_xi(z.as_slice(), &xi);
                            let r = (gxi.iter().map(|v| v * v).sum::<f64>() + GRADIENT_NORM_SMOOTHING).sqrt();
                            if let Some(g) = g {
                                let mj = c.mixed_jacobian(z.as_slice(), &xi);
                                let d = mj.transpose() * DVector::from_column_slice(&gxi) / r;
                                cond.pull_back(t, d.as_slice(), &mut g[..input_len]);
                                g[s_idx] = -1.0;
                            }
                            r - w[s_idx]
                        }));
                    }
                }
                TighteningMode::KernelDrc { .. } => {
                    let stage = ctx.stage_drc(time + t - 1, ci)?;
                    match cfg.kdrc_form {
                        KdrcForm::Nested => {
                            let (cond, z0) = (Arc::clone(&cond), z0.clone());
                            problem = problem.constraint(Box::new(move |w, g| {
                                let z = cond.state(t, &z0, &w[..input_len]);
                                match stage.evaluate(z.as_slice()) {
                                    Ok(val) => {
                                        if let Some(g) = g {
                                            cond.pull_back(t, &val.grad_x, &mut g[..input_len]);
                                        }
                                        val.value
                                    }
                                    Err(_) => f64::NAN,
                                }
                            }));
                        }
                        KdrcForm::Joint => {
                            let slot = slot_of(t, ci).expect("slot allocated");
                            for row in stage.block.rows() {
                                let (cond, z0, stage) = (Arc::clone(&cond), z0.clone(), Arc::clone(&stage));
                                let (off, len) = (slot.offset, slot.len);
                                problem = problem.constraint(Box::new(move |w, g| {
                                    let z = cond.state(t, &z0, &w[..input_len]);
                                    let a = &w[off..off + len];
                                    match g {
                                        Some(g) => {
                                            let mut gx = vec![0.0; z.len()];
                                            let val = stage.block.row_value(
                                                row,
                                                z.as_slice(),
                                                a,
                                                Some(&mut gx),
                                                Some(&mut g[off..off + len]),
                                            );
                                            cond.pull_back(t, &gx, &mut g[..input_len]);
                                            val
                                        }
                                        None => stage.block.row_value(row, z.as_slice(), a, None, None),
                                    }
                                }));
                            }
                        }
                    }
                }
            }
        }
    }

    Ok(MpcProgram {
        problem,
        input_len,
        aux,
        z_init: z0,
        time,
    })
}

/// The tightened condensed program at time zero with a fresh context.
pub fn build_mpc_nlp(config: &MpcConfig, z_init: &[f64], scenarios: &ScenarioSet) -> Result<NlpProblem> {
    let ctx = MpcContext::new(config.clone(), scenarios.clone())?;
    let mut p = build_mpc_program(&ctx, z_init, 0)?;
    p.problem.initial_guess = initial_guess(&ctx, &p, None)?;
    Ok(p.problem)
}

impl MpcProgram {
    /// Nominal states `z_0..z_T` for the input part of `w`.
    pub fn states(&self, ctx: &MpcContext, w: &[f64]) -> Vec<Vec<f64>> {
        (0..=ctx.condensed.horizon())
            .map(|t| ctx.condensed.state(t, &self.z_init, &w[..self.input_len]).as_slice().to_vec())
            .collect()
    }
}

/// Previous solution shifted by one step, with the tube gain filling the tail.
fn initial_guess(ctx: &MpcContext, prog: &MpcProgram, previous: Option<&MpcPlan>) -> Result<Vec<f64>> {
    let cfg = &ctx.config;
    let m = cfg.system.input_dim();
    let horizon = cfg.horizon;
    let mut w = vec![0.0; prog.problem.variable_count];
    if let Some(prev) = previous {
        for t in 0..horizon - 1 {
            w[t * m..(t + 1) * m].copy_from_slice(&prev.inputs[t + 1]);
        }
        let zt = DVector::from_column_slice(prev.states.last().expect("nonempty plan"));
        let tail = &cfg.tube_gain * zt;
        w[(horizon - 1) * m..horizon * m].copy_from_slice(tail.as_slice());
    }
    let states = prog.states(ctx, &w);
    for slot in &prog.aux {
        let z = &states[slot.stage];
        let entry = &cfg.constraints[slot.constraint];
        let scen = ctx.stage_scenarios(prog.time, slot.stage);
        match slot.kind {
            AuxKind::GradientBound => {
                let top = scen
                    .iter()
                    .map(|xi| entry.constraint.grad_xi(z, xi).iter().map(|v| v * v).sum::<f64>().sqrt())
                    .fold(0.0, f64::max);
                w[slot.offset] = top + 1e-3;
            }
            AuxKind::JointDrc => {
                let stage = ctx.stage_drc(prog.time + slot.stage - 1, slot.constraint)?;
                let mut a = stage.block.initial_aux(z);
                let n = stage.block.scenario_count();
                a[n + 1] = 1e-3;
                w[slot.offset..slot.offset + slot.len].copy_from_slice(&a);
            }
        }
    }
    Ok(w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcPlan {
    /// Absolute time at which the plan was computed.
    pub time: usize,
    /// `z_0..z_T`.
    pub states: Vec<Vec<f64>>,
    /// `v_0..v_{T-1}`.
    pub inputs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageAudit {
    pub stage: usize,
    pub constraint: String,
    pub audit: DrcAudit,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepOutcome {
    pub input: Vec<f64>,
    pub plan: MpcPlan,
    pub status: SolveStatus,
    /// The hard program failed and the soft fallback needed a positive slack.
    pub infeasible: bool,
    pub slack: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub solve_seconds: f64,
    pub drc_audits: Vec<StageAudit>,
}

/// One MPC step with indirect feedback: the nominal state continues the
/// previous plan, and the measurement enters only through `u = K e + v_0`.
pub fn mpc_step(
    ctx: &MpcContext,
    previous: Option<&MpcPlan>,
    measured_state: &[f64],
    time: usize,
) -> Result<StepOutcome> {
    let cfg = &ctx.config;
    check_dim(cfg.system.state_dim(), measured_state.len())?;
    let z0: Vec<f64> = match previous {
        Some(p) => p.states.get(1).cloned().ok_or_else(|| Error::input("previous plan is empty"))?,
        None => measured_state.to_vec(),
    };
    let start = Instant::now();
    let mut prog = build_mpc_program(ctx, &z0, time)?;
    prog.problem.initial_guess = initial_guess(ctx, &prog, previous)?;
    let opts = SolverOptions {
        tolerance: cfg.tolerance,
        max_iterations: cfg.max_iterations,
        ..SolverOptions::default()
    };
    let report = nlp::solve_with(&prog.problem, &opts)?;
    let hard_ok = report.status == SolveStatus::Optimal
        || (report.max_violation <= cfg.tolerance && report.status == SolveStatus::MaxIterations);
    let (solution, status, kkt, iterations, slack) = if hard_ok {
        (report.solution, report.status, report.kkt_residual, report.iterations, 0.0)
    } else {
        let hard = std::mem::replace(&mut prog.problem, NlpProblem::new(0, Box::new(|_, _| 0.0), Vec::new()));
        let guess = hard.initial_guess.clone();
        let soft = solve_soft(hard, &guess, &opts)?;
        let slack = *soft.solution.last().expect("slack variable");
        let mut sol = soft.solution;
        sol.pop();
        (sol, soft.status, soft.kkt_residual, report.iterations + soft.iterations, slack.max(0.0))
    };
    let solve_seconds = start.elapsed().as_secs_f64();

    let m = cfg.system.input_dim();
    let states = prog.states(ctx, &solution);
    let inputs: Vec<Vec<f64>> = (0..cfg.horizon).map(|t| solution[t * m..(t + 1) * m].to_vec()).collect();
    let e = DVector::from_column_slice(measured_state) - DVector::from_column_slice(&z0);
    let fb = &cfg.tube_gain * e;
    let input: Vec<f64> = inputs[0].iter().zip(fb.iter()).map(|(v, k)| v + k).collect();

    let mut drc_audits = Vec::new();
    for (ci, entry) in cfg.constraints.iter().enumerate() {
        if !matches!(entry.mode, TighteningMode::KernelDrc { .. }) {
            continue;
        }
        for t in 1..=cfg.horizon {
            let stage = ctx.stage_drc(time + t - 1, ci)?;
            let aux = match cfg.kdrc_form {
                KdrcForm::Nested => stage.evaluate(&states[t])?.aux,
                KdrcForm::Joint => {
                    let slot = prog
                        .aux
                        .iter()
                        .find(|s| s.stage == t && s.constraint == ci)
                        .expect("slot allocated");
                    solution[slot.offset..slot.offset + slot.len].to_vec()
                }
            };
            drc_audits.push(StageAudit {
                stage: t,
                constraint: entry.constraint.label().to_string(),
                audit: stage.block.audit(&states[t], &aux, &stage.audit_points),
            });
        }
    }

    Ok(StepOutcome {
        input,
        plan: MpcPlan { time, states, inputs },
        status,
        infeasible: slack > cfg.tolerance,
        slack,
        kkt_residual: kkt,
        iterations,
        solve_seconds,
        drc_audits,
    })
}

/// Every row relaxed by one shared slack `s >= 0` priced at [`SOFT_PENALTY`].
fn solve_soft(hard: NlpProblem, start: &[f64], opts: &SolverOptions) -> Result<nlp::SolveReport> {
    let n = hard.variable_count;
    let viol = hard.max_violation(start);
    let viol = if viol.is_finite() { viol } else { 1e3 };
    let mut guess = start.to_vec();
    guess.push(viol + 1.0);
    let mut h = DMatrix::identity(n + 1, n + 1);
    if let Some(h0) = &hard.initial_hessian {
        h.view_mut((0, 0), (n, n)).copy_from(h0);
    }
    let f = hard.objective;
    let objective: Oracle = Box::new(move |w, g| match g {
        Some(g) => {
            let v = f(&w[..n], Some(&mut g[..n]));
            g[n] = SOFT_PENALTY;
            v + SOFT_PENALTY * w[n]
        }
        None => f(&w[..n], None) + SOFT_PENALTY * w[n],
    });
    let mut soft = NlpProblem::new(n + 1, objective, guess);
    soft.initial_hessian = Some(h);
    for row in hard.inequality_constraints {
        soft = soft.constraint(Box::new(move |w, g| match g {
            Some(g) => {
                let v = row(&w[..n], Some(&mut g[..n]));
                g[n] = -1.0;
                v - w[n]
            }
            None => row(&w[..n], None) - w[n],
        }));
    }
    soft = soft.constraint(Box::new(move |w, g| {
        if let Some(g) = g {
            g[n] = -1.0;
        }
        -w[n]
    }));
    nlp::solve_with(&soft, opts)
}
