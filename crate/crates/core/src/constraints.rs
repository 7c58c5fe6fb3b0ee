//! Uncertain constraints `C(x, xi) <= 0` and their tightenings.
//!
//! Four schemes are offered: the plain scenario max, the gradient-norm
//! regularizer, the kernel DRC block built on a majorizing RKHS function, and
//! a constant RKHS-norm term for constraints that are themselves kernel
//! expansions.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::kernel::{kernel_matrix, KernelSpec, RkhsFunction};
use crate::nlp::{self, NlpProblem, Oracle, SolveStatus};

/// An uncertain inequality with first-order oracles in both arguments.
pub trait UncertainConstraint: Send + Sync + fmt::Debug {
    fn label(&self) -> &str;

    /// Dimension shared by `x` and `xi`.
    fn dim(&self) -> usize;

    fn value(&self, x: &[f64], xi: &[f64]) -> f64;

    fn grad_x(&self, x: &[f64], xi: &[f64]) -> Vec<f64>;

    fn grad_xi(&self, x: &[f64], xi: &[f64]) -> Vec<f64>;

    /// `d/dx grad_xi`, rows indexed by `xi`, columns by `x`.
    fn mixed_jacobian(&self, x: &[f64], xi: &[f64]) -> DMatrix<f64> {
        let n = self.dim();
        let h = 1e-6;
        let mut xp = x.to_vec();
        let mut out = DMatrix::zeros(n, n);
        for j in 0..n {
            xp[j] = x[j] + h;
            let up = self.grad_xi(&xp, xi);
            xp[j] = x[j] - h;
            let down = self.grad_xi(&xp, xi);
            xp[j] = x[j];
            for i in 0..n {
                out[(i, j)] = (up[i] - down[i]) / (2.0 * h);
            }
        }
        out
    }

    /// RKHS norm of `C(x, .)` when the constraint is itself a kernel expansion.
    fn native_rkhs_norm(&self) -> Option<f64> {
        None
    }

    /// True when `C(x, xi) = a'x + g(xi)` for a constant `a`.
    fn affine_in_x(&self) -> bool {
        false
    }
}

pub type ConstraintSpec = Arc<dyn UncertainConstraint>;

fn add(x: &[f64], xi: &[f64]) -> Vec<f64> {
    x.iter().zip(xi).map(|(a, b)| a + b).collect()
}

/// `normal . (x + xi) - offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineConstraint {
    pub label: String,
    pub normal: Vec<f64>,
    pub offset: f64,
}

impl UncertainConstraint for AffineConstraint {
    fn label(&self) -> &str {
        &self.label
    }
    fn dim(&self) -> usize {
        self.normal.len()
    }
    fn value(&self, x: &[f64], xi: &[f64]) -> f64 {
        self.normal
            .iter()
            .zip(x.iter().zip(xi))
            .map(|(h, (a, b))| h * (a + b))
            .sum::<f64>()
            - self.offset
    }
    fn grad_x(&self, _: &[f64], _: &[f64]) -> Vec<f64> {
        self.normal.clone()
    }
    fn grad_xi(&self, _: &[f64], _: &[f64]) -> Vec<f64> {
        self.normal.clone()
    }
    fn affine_in_x(&self) -> bool {
        true
    }
    fn mixed_jacobian(&self, _: &[f64], _: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(self.dim(), self.dim())
    }
}

/// `-5 + exp(0.1 (x1 + xi1)) - x2 - xi2`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ExpConstraint;

impl ExpConstraint {
    fn grad(y: &[f64]) -> Vec<f64> {
        vec![0.1 * (0.1 * y[0]).exp(), -1.0]
    }
}

impl UncertainConstraint for ExpConstraint {
    fn label(&self) -> &str {
        "exp"
    }
    fn dim(&self) -> usize {
        2
    }
    fn value(&self, x: &[f64], xi: &[f64]) -> f64 {
        let y = add(x, xi);
        -5.0 + (0.1 * y[0]).exp() - y[1]
    }
    fn grad_x(&self, x: &[f64], xi: &[f64]) -> Vec<f64> {
        Self::grad(&add(x, xi))
    }
    fn grad_xi(&self, x: &[f64], xi: &[f64]) -> Vec<f64> {
        Self::grad(&add(x, xi))
    }
    fn mixed_jacobian(&self, x: &[f64], xi: &[f64]) -> DMatrix<f64> {
        let y0 = x[0] + xi[0];
        DMatrix::from_row_slice(2, 2, &[0.01 * (0.1 * y0).exp(), 0.0, 0.0, 0.0])
    }
}

/// The two built-in constraints of the double-integrator experiment.
#[derive(Debug, Clone)]
pub struct Builtins {
    /// `|x2 + xi2| - 3`, as its two smooth branches.
    pub lin: [ConstraintSpec; 2],
    pub exp: ConstraintSpec,
}

pub fn builtin_constraints() -> Builtins {
    Builtins {
        lin: [
            Arc::new(AffineConstraint {
                label: "lin_upper".into(),
                normal: vec![0.0, 1.0],
                offset: 3.0,
            }),
            Arc::new(AffineConstraint {
                label: "lin_lower".into(),
                normal: vec![0.0, -1.0],
                offset: 3.0,
            }),
        ],
        exp: Arc::new(ExpConstraint),
    }
}

/// Tightening scheme applied to every constraint of an MPC problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum TighteningMode {
    #[serde(rename = "tube")]
    ScenarioOnly,
    #[serde(rename = "grad")]
    GradientNorm { epsilon: f64 },
    #[serde(rename = "kdrc")]
    KernelDrc {
        epsilon: f64,
        kernel: KernelSpec,
        #[serde(default)]
        grid: GridSpec,
    },
    #[serde(rename = "native")]
    NativeRkhsNorm { epsilon: f64 },
}

impl TighteningMode {
    pub fn epsilon(&self) -> f64 {
        match *self {
            TighteningMode::ScenarioOnly => 0.0,
            TighteningMode::GradientNorm { epsilon }
            | TighteningMode::KernelDrc { epsilon, .. }
            | TighteningMode::NativeRkhsNorm { epsilon } => epsilon,
        }
    }

    pub fn with_epsilon(self, epsilon: f64) -> Self {
        match self {
            TighteningMode::ScenarioOnly => self,
            TighteningMode::GradientNorm { .. } => TighteningMode::GradientNorm { epsilon },
            TighteningMode::KernelDrc { kernel, grid, .. } => TighteningMode::KernelDrc { epsilon, kernel, grid },
            TighteningMode::NativeRkhsNorm { .. } => TighteningMode::NativeRkhsNorm { epsilon },
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TighteningMode::ScenarioOnly => "tube",
            TighteningMode::GradientNorm { .. } => "grad",
            TighteningMode::KernelDrc { .. } => "kdrc",
            TighteningMode::NativeRkhsNorm { .. } => "native",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let eps = self.epsilon();
        if !(eps >= 0.0) || !eps.is_finite() {
            return Err(Error::input(format!("epsilon must be finite and nonnegative, got {eps}")));
        }
        if let TighteningMode::KernelDrc { kernel, grid, .. } = self {
            kernel.validate()?;
            grid.validate()?;
        }
        Ok(())
    }
}

/// Uniform lattice over the scenario bounding box, enlarged by `margin`
/// (a fraction of the half-width) and then by `padding` (absolute).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Zero keeps only the scenario points.
    pub points_per_dimension: usize,
    pub margin: f64,
    #[serde(default)]
    pub padding: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            points_per_dimension: 5,
            margin: 0.25,
            padding: 0.0,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) || !self.margin.is_finite() {
            return Err(Error::input(format!("grid margin must be nonnegative, got {}", self.margin)));
        }
        if !(self.padding >= 0.0) || !self.padding.is_finite() {
            return Err(Error::input(format!("grid padding must be nonnegative, got {}", self.padding)));
        }
        Ok(())
    }

    /// Lattice points only, without the scenarios.
    pub fn lattice(&self, scenarios: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let Some(first) = scenarios.first() else {
            return Vec::new();
        };
        let k = self.points_per_dimension;
        if k == 0 {
            return Vec::new();
        }
        let dim = first.len();
        let axes: Vec<Vec<f64>> = (0..dim)
            .map(|d| {
                let lo = scenarios.iter().map(|p| p[d]).fold(f64::INFINITY, f64::min);
                let hi = scenarios.iter().map(|p| p[d]).fold(f64::NEG_INFINITY, f64::max);
                let mid = 0.5 * (lo + hi);
                let half = 0.5 * (hi - lo) * (1.0 + self.margin) + self.padding;
                if k == 1 {
                    vec![mid]
                } else {
                    (0..k).map(|i| mid - half + 2.0 * half * i as f64 / (k - 1) as f64).collect()
                }
            })
            .collect();
        let total = k.pow(dim as u32);
        (0..total)
            .map(|mut idx| {
                (0..dim)
                    .map(|d| {
                        let v = axes[d][idx % k];
                        idx /= k;
                        v
                    })
                    .collect()
            })
            .collect()
    }

    /// Lattice plus scenarios, duplicates removed.
    pub fn support(&self, scenarios: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut out = self.lattice(scenarios);
        for s in scenarios {
            out.push(s.clone());
        }
        dedup_points(out)
    }

    /// A finer lattice over the same box for after-the-fact auditing.
    pub fn audit(&self, scenarios: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let finer = GridSpec {
            points_per_dimension: (2 * self.points_per_dimension).max(2) + 1,
            ..*self
        };
        finer.support(scenarios)
    }
}

fn dedup_points(points: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(points.len());
    for p in points {
        if !out.iter().any(|q| q == &p) {
            out.push(p);
        }
    }
    out
}

/// Error-state samples per time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    pub per_step: Vec<Vec<Vec<f64>>>,
}

impl ScenarioSet {
    pub fn new(per_step: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let set = ScenarioSet { per_step };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.per_step.first() else {
            return Err(Error::input("scenario set has no steps"));
        };
        let n = first.len();
        if n == 0 {
            return Err(Error::input("scenario count must be at least one"));
        }
        let dim = first[0].len();
        for step in &self.per_step {
            check_dim(n, step.len())?;
            for p in step {
                check_dim(dim, p.len())?;
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.per_step.len()
    }

    pub fn count(&self) -> usize {
        self.per_step[0].len()
    }

    pub fn step(&self, t: usize) -> &[Vec<f64>] {
        &self.per_step[t]
    }
}

fn check_inputs(c: &dyn UncertainConstraint, x: &[f64], scenarios: &[Vec<f64>]) -> Result<()> {
    if scenarios.is_empty() {
        return Err(Error::input("scenario list is empty"));
    }
    check_dim(c.dim(), x.len())?;
    for s in scenarios {
        check_dim(c.dim(), s.len())?;
    }
    Ok(())
}

fn check_epsilon(eps: f64) -> Result<()> {
    if eps >= 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::input(format!("epsilon must be finite and nonnegative, got {eps}")))
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// `max_i C(x, xi_i)`.
pub fn scenario_tightening(c: &dyn UncertainConstraint, x: &[f64], scenarios: &[Vec<f64>]) -> Result<f64> {
    check_inputs(c, x, scenarios)?;
    Ok(scenarios.iter().map(|s| c.value(x, s)).fold(f64::NEG_INFINITY, f64::max))
}

/// `max_i ||grad_xi C(x, xi_i)||_2`.
pub fn max_gradient_norm(c: &dyn UncertainConstraint, x: &[f64], scenarios: &[Vec<f64>]) -> Result<f64> {
    check_inputs(c, x, scenarios)?;
    Ok(scenarios.iter().map(|s| norm(&c.grad_xi(x, s))).fold(0.0, f64::max))
}

/// `max_i C(x, xi_i) + eps * max_i ||grad_xi C(x, xi_i)||_2`.
pub fn gradient_tightening(
    c: &dyn UncertainConstraint,
    x: &[f64],
    scenarios: &[Vec<f64>],
    epsilon: f64,
) -> Result<f64> {
    check_epsilon(epsilon)?;
    let base = scenario_tightening(c, x, scenarios)?;
    if epsilon == 0.0 {
        return Ok(base);
    }
    Ok(base + epsilon * max_gradient_norm(c, x, scenarios)?)
}

/// `max_i C(x, xi_i) + eps * ||C||_H` for kernel-expansion constraints.
pub fn native_rkhs_tightening(
    c: &dyn UncertainConstraint,
    x: &[f64],
    scenarios: &[Vec<f64>],
    epsilon: f64,
) -> Result<f64> {
    check_epsilon(epsilon)?;
    let norm = c
        .native_rkhs_norm()
        .ok_or_else(|| Error::input(format!("constraint '{}' has no native RKHS norm", c.label())))?;
    Ok(scenario_tightening(c, x, scenarios)? + epsilon * norm)
}

const NORM_SMOOTHING: f64 = 1e-4;
const INNER_TOLERANCE: f64 = 1e-8;
const INNER_ITERATIONS: usize = 200;
/// KKT residual below which a stalled inner solve is accepted as converged.
pub const INNER_ACCEPT: f64 = 1e-5;

/// One inequality row of a kernel DRC block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrcRow {
    /// `h(xi_j) + eps t <= 0`.
    Scenario(usize),
    /// `sqrt(alpha' K alpha + d^2) - t <= 0` with a tiny smoothing `d`.
    Norm,
    /// `-t <= 0`.
    NonNegative,
    /// `C(x, xi_g) - h(xi_g) <= 0` on a support point.
    Majorization(usize),
}

/// Kernel DRC constraint block for one uncertain constraint.
///
/// Auxiliary variables are laid out as `[alpha_1..alpha_N, f0, t]` with the
/// RKHS centers fixed to the scenario points. The block can be embedded in a
/// host NLP row by row, or reduced to its value function
/// `tau(x) = min { max_j h(xi_j) + eps ||h|| : h >= C(x, .) on the support }`
/// through [`KernelDrcBlock::tightening`].
#[derive(Debug, Clone)]
pub struct KernelDrcBlock {
    pub constraint: ConstraintSpec,
    pub centers: Vec<Vec<f64>>,
    pub support: Vec<Vec<f64>>,
    pub epsilon: f64,
    pub kernel: KernelSpec,
    /// Extra points on which [`KernelDrcBlock::tightening`] certifies
    /// majorization by raising `f0` after the solve.
    pub certify: Vec<Vec<f64>>,
    gram: Arc<DMatrix<f64>>,
    /// Kernel values between support points (rows) and centers (columns).
    cross: Arc<DMatrix<f64>>,
}

/// Result of solving the block's inner program at a fixed `x`.
#[derive(Debug, Clone)]
pub struct DrcValue {
    /// `max_j h(xi_j) + eps ||h||` for the returned majorant.
    pub value: f64,
    pub grad_x: Vec<f64>,
    pub aux: Vec<f64>,
    pub status: SolveStatus,
    pub kkt_residual: f64,
}

/// Post-solve checks of the kernel DRC inequality chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrcAudit {
    /// `max_j h(xi_j) + eps ||h||`; must be `<= 0`.
    pub robust_value: f64,
    /// `min (h - C)` over the enforcement support; must be `>= 0`.
    pub support_residual: f64,
    /// `min (h - C)` over a finer lattice; reported only.
    pub audit_residual: f64,
    pub rkhs_norm: f64,
}

pub fn build_kernel_drc_block(
    constraint: ConstraintSpec,
    scenarios: &[Vec<f64>],
    support: &[Vec<f64>],
    epsilon: f64,
    kernel: KernelSpec,
) -> Result<KernelDrcBlock> {
    check_epsilon(epsilon)?;
    kernel.validate()?;
    if scenarios.is_empty() {
        return Err(Error::input("kernel DRC block needs at least one scenario"));
    }
    if support.is_empty() {
        return Err(Error::input("kernel DRC block needs a nonempty support grid"));
    }
    for p in scenarios.iter().chain(support) {
        check_dim(constraint.dim(), p.len())?;
    }
    let gram = kernel_matrix(scenarios, &kernel)?;
    let cross = DMatrix::from_fn(support.len(), scenarios.len(), |g, i| {
        kernel.eval_unchecked(&support[g], &scenarios[i])
    });
    Ok(KernelDrcBlock {
        constraint,
        centers: scenarios.to_vec(),
        support: support.to_vec(),
        epsilon,
        kernel,
        certify: Vec::new(),
        gram: Arc::new(gram),
        cross: Arc::new(cross),
    })
}

impl KernelDrcBlock {
    /// Certify majorization on `points` as well as on the support.
    pub fn with_certification(mut self, points: Vec<Vec<f64>>) -> Result<Self> {
        for p in &points {
            check_dim(self.constraint.dim(), p.len())?;
        }
        self.certify = points;
        Ok(self)
    }

    pub fn scenario_count(&self) -> usize {
        self.centers.len()
    }

    pub fn aux_len(&self) -> usize {
        self.centers.len() + 2
    }

    pub fn rows(&self) -> Vec<DrcRow> {
        let mut rows: Vec<DrcRow> = (0..self.centers.len()).map(DrcRow::Scenario).collect();
        rows.push(DrcRow::Norm);
        rows.push(DrcRow::NonNegative);
        rows.extend((0..self.support.len()).map(DrcRow::Majorization));
        rows
    }

    pub fn rkhs_function(&self, aux: &[f64]) -> RkhsFunction {
        let n = self.centers.len();
        RkhsFunction {
            offset: aux[n],
            centers: self.centers.clone(),
            coefficients: aux[..n].to_vec(),
            kernel: self.kernel,
        }
    }

    /// A feasible starting point: constant majorant, tiny positive `t`.
    pub fn initial_aux(&self, x: &[f64]) -> Vec<f64> {
        let n = self.centers.len();
        let top = self
            .support
            .iter()
            .map(|s| self.constraint.value(x, s))
            .fold(f64::NEG_INFINITY, f64::max);
        let mut aux = vec![0.0; n + 2];
        aux[n] = top;
        aux[n + 1] = 1e-3;
        aux
    }

    fn alpha_dot(row: nalgebra::DMatrixView<'_, f64>, alpha: &[f64]) -> f64 {
        row.iter().zip(alpha).map(|(k, a)| k * a).sum()
    }

    /// Value of one row at `(x, aux)`; gradients are written into the given
    /// buffers, which must be zeroed by the caller.
    pub fn row_value(
        &self,
        row: DrcRow,
        x: &[f64],
        aux: &[f64],
        grad_x: Option<&mut [f64]>,
        grad_aux: Option<&mut [f64]>,
    ) -> f64 {
        let n = self.centers.len();
        let (alpha, f0, t) = (&aux[..n], aux[n], aux[n + 1]);
        match row {
            DrcRow::Scenario(j) => {
                let krow = self.gram.rows(j, 1);
                if let Some(g) = grad_aux {
                    for (gi, k) in g[..n].iter_mut().zip(krow.iter()) {
                        *gi = *k;
                    }
                    g[n] = 1.0;
                    g[n + 1] = self.epsilon;
                }
                f0 + Self::alpha_dot(krow, alpha) + self.epsilon * t
            }
            DrcRow::Norm => {
                let a = DVector::from_column_slice(alpha);
                let ka = &*self.gram * &a;
                let r = (a.dot(&ka).max(0.0) + NORM_SMOOTHING * NORM_SMOOTHING).sqrt();
                if let Some(g) = grad_aux {
                    for i in 0..n {
                        g[i] = ka[i] / r;
                    }
                    g[n + 1] = -1.0;
                }
                r - t
            }
            DrcRow::NonNegative => {
                if let Some(g) = grad_aux {
                    g[n + 1] = -1.0;
                }
                -t
            }
            DrcRow::Majorization(s) => {
                let krow = self.cross.rows(s, 1);
                let xi = &self.support[s];
                if let Some(g) = grad_aux {
                    for (gi, k) in g[..n].iter_mut().zip(krow.iter()) {
                        *gi = -*k;
                    }
                    g[n] = -1.0;
                }
                if let Some(g) = grad_x {
                    g.copy_from_slice(&self.constraint.grad_x(x, xi));
                }
                self.constraint.value(x, xi) - f0 - Self::alpha_dot(krow, alpha)
            }
        }
    }

    /// Solve the inner program at fixed `x`. Its optimal value is the kernel
    /// DRC tightening of `C(x, .)`; the `x`-gradient follows from the
    /// majorization multipliers.
    pub fn tightening(&self, x: &[f64], warm: Option<&[f64]>) -> Result<DrcValue> {
        check_dim(self.constraint.dim(), x.len())?;
        let n = self.centers.len();
        let na = n + 2;
        let eps = self.epsilon;
        let raw: Vec<f64> = self.support.iter().map(|s| self.constraint.value(x, s)).collect();
        if raw.iter().any(|c| !c.is_finite()) {
            return Err(Error::input("constraint is not finite on the support"));
        }
        // the program is positively homogeneous in C, so solve it at unit scale
        let scale = raw.iter().fold(1.0f64, |m, c| m.max(c.abs()));
        let cvals: Arc<Vec<f64>> = Arc::new(raw.iter().map(|c| c / scale).collect());

        // variables: [alpha, f0, t, tau]
        let mut start: Vec<f64> = match warm {
            Some(w) if w.len() == na => w.to_vec(),
            _ => self.initial_aux(x),
        }
        .into_iter()
        .map(|v| v / scale)
        .collect();
        // smallest f0 meeting every majorization row for this alpha
        start[n] = (0..self.support.len())
            .map(|s| cvals[s] - Self::alpha_dot(self.cross.rows(s, 1), &start[..n]))
            .fold(f64::NEG_INFINITY, f64::max);
        start[n + 1] = start[n + 1].max(self.rkhs_norm_of(&start[..n])).max(1e-3);
        let top = (0..n)
            .map(|j| start[n] + Self::alpha_dot(self.gram.rows(j, 1), &start[..n]))
            .fold(f64::NEG_INFINITY, f64::max);
        start.push(top + eps * start[n + 1]);

        let objective: Oracle = Box::new(move |v, g| {
            if let Some(g) = g {
                g[na] = 1.0;
            }
            v[na]
        });
        let mut problem = NlpProblem::new(na + 1, objective, start);
        for j in 0..n {
            let gram = Arc::clone(&self.gram);
            problem = problem.constraint(Box::new(move |v, g| {
                let krow = gram.rows(j, 1);
                if let Some(g) = g {
                    for (gi, k) in g[..n].iter_mut().zip(krow.iter()) {
                        *gi = *k;
                    }
                    g[n] = 1.0;
                    g[n + 1] = eps;
                    g[na] = -1.0;
                }
                v[n] + Self::alpha_dot(krow, &v[..n]) + eps * v[n + 1] - v[na]
            }));
        }
        {
            // convex smoothed norm epigraph; exact up to `NORM_SMOOTHING`
            let gram = Arc::clone(&self.gram);
            problem = problem.constraint(Box::new(move |v, g| {
                let a = DVector::from_column_slice(&v[..n]);
                let ka = &*gram * &a;
                let r = (a.dot(&ka).max(0.0) + NORM_SMOOTHING * NORM_SMOOTHING).sqrt();
                if let Some(g) = g {
                    for i in 0..n {
                        g[i] = ka[i] / r;
                    }
                    g[n + 1] = -1.0;
                }
                r - v[n + 1]
            }));
        }
        for s in 0..self.support.len() {
            let cross = Arc::clone(&self.cross);
            let cvals = Arc::clone(&cvals);
            problem = problem.constraint(Box::new(move |v, g| {
                let krow = cross.rows(s, 1);
                if let Some(g) = g {
                    for (gi, k) in g[..n].iter_mut().zip(krow.iter()) {
                        *gi = -*k;
                    }
                    g[n] = -1.0;
                }
                cvals[s] - v[n] - Self::alpha_dot(krow, &v[..n])
            }));
        }

        let report = nlp::solve(&problem, INNER_TOLERANCE, INNER_ITERATIONS)?;
        let mut grad_x = vec![0.0; x.len()];
        for (s, xi) in self.support.iter().enumerate() {
            let mu = report.multipliers[n + 1 + s];
            if mu != 0.0 {
                for (g, d) in grad_x.iter_mut().zip(self.constraint.grad_x(x, xi)) {
                    *g += mu * d;
                }
            }
        }
        let mut aux: Vec<f64> = report.solution[..na].iter().map(|v| v * scale).collect();
        // raise f0 until h >= C on the certification points; grad_x is left as is
        let h = self.rkhs_function(&aux);
        let shortfall = self
            .certify
            .iter()
            .map(|p| self.constraint.value(x, p) - h.eval_unchecked(p))
            .fold(0.0, f64::max);
        aux[n] += shortfall;
        let value = self.exact_value(&aux);
        Ok(DrcValue {
            value,
            grad_x,
            aux,
            status: report.status,
            kkt_residual: report.kkt_residual,
        })
    }

    fn rkhs_norm_of(&self, alpha: &[f64]) -> f64 {
        let a = DVector::from_column_slice(alpha);
        a.dot(&(&*self.gram * &a)).max(0.0).sqrt()
    }

    /// `max_j h(xi_j) + eps ||h||`.
    fn exact_value(&self, aux: &[f64]) -> f64 {
        let n = self.centers.len();
        (0..n)
            .map(|j| aux[n] + Self::alpha_dot(self.gram.rows(j, 1), &aux[..n]))
            .fold(f64::NEG_INFINITY, f64::max)
            + self.epsilon * self.rkhs_norm_of(&aux[..n])
    }

    /// Check the inequality chain at a solved point. `audit` is an optional
    /// finer point set on which the majorization residual is only reported.
    pub fn audit(&self, x: &[f64], aux: &[f64], audit: &[Vec<f64>]) -> DrcAudit {
        let h = self.rkhs_function(aux);
        let norm = h.norm();
        let top = self.centers.iter().map(|c| h.eval_unchecked(c)).fold(f64::NEG_INFINITY, f64::max);
        let residual = |pts: &[Vec<f64>]| {
            pts.iter()
                .map(|p| h.eval_unchecked(p) - self.constraint.value(x, p))
                .fold(f64::INFINITY, f64::min)
        };
        DrcAudit {
            robust_value: top + self.epsilon * norm,
            support_residual: residual(&self.support),
            audit_residual: if audit.is_empty() { f64::NAN } else { residual(audit) },
            rkhs_norm: norm,
        }
    }
}

/// Geometry of the ambiguity ball probed by [`supremum_bias_identities`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BiasGeometry {
    /// Type-1 Wasserstein ball around the samples.
    Wasserstein,
    /// MMD ball for the given kernel; the constraint must expose its norm.
    Mmd(KernelSpec),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasReport {
    /// Closed-form supremum of the bias over the ball.
    pub bound: f64,
    /// Largest bias found by random search (scaled to the ball radius).
    pub best_found: f64,
    /// `max(0, best_found - bound)`; zero when the identity holds.
    pub violation: f64,
}

/// Random-search probe of the worst-case bias `E_P C - E_Phat C` over an
/// ambiguity ball of radius `epsilon` around the empirical measure.
pub fn supremum_bias_identities(
    c: &dyn UncertainConstraint,
    x: &[f64],
    samples: &[Vec<f64>],
    epsilon: f64,
    geometry: BiasGeometry,
    trials: usize,
    seed: u64,
) -> Result<BiasReport> {
    check_inputs(c, x, samples)?;
    check_epsilon(epsilon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = samples.len();
    let dim = c.dim();
    let base: f64 = samples.iter().map(|s| c.value(x, s)).sum::<f64>() / n as f64;
    let mut best = 0.0f64;
    match geometry {
        BiasGeometry::Wasserstein => {
            let lip = samples.iter().map(|s| norm(&c.grad_xi(x, s))).fold(0.0, f64::max);
            let bound = epsilon * lip;
            if epsilon > 0.0 {
                for _ in 0..trials {
                    // displace every sample around a shared random heading;
                    // average displacement equals epsilon
                    let heading: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let hl = norm(&heading).max(1e-300);
                    let jitter: f64 = rng.random::<f64>();
                    let dirs: Vec<Vec<f64>> = (0..n)
                        .map(|_| {
                            (0..dim)
                                .map(|k| {
                                    let z: f64 = StandardNormal.sample(&mut rng);
                                    heading[k] / hl + jitter * z
                                })
                                .collect()
                        })
                        .collect();
                    let weights: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
                    let wsum: f64 = weights.iter().sum();
                    let mut total = 0.0;
                    for i in 0..n {
                        let d = &dirs[i];
                        let len = norm(d).max(1e-300);
                        let step = epsilon * n as f64 * weights[i] / wsum;
                        let moved: Vec<f64> = samples[i].iter().zip(d).map(|(s, di)| s + step * di / len).collect();
                        total += c.value(x, &moved);
                    }
                    best = best.max(total / n as f64 - base);
                }
            }
            Ok(BiasReport {
                bound,
                best_found: best,
                violation: (best - bound).max(0.0),
            })
        }
        BiasGeometry::Mmd(kernel) => {
            let hnorm = c
                .native_rkhs_norm()
                .ok_or_else(|| Error::input("MMD bias identity needs a native RKHS norm"))?;
            let bound = epsilon * hnorm;
            if epsilon > 0.0 {
                let spread = samples
                    .iter()
                    .flat_map(|s| s.iter())
                    .fold(0.0f64, |m, v| m.max(v.abs()))
                    .max(1.0);
                for _ in 0..trials {
                    // candidate P: reweighted samples plus a few fresh atoms
                    let extra = 3usize;
                    let mut atoms: Vec<Vec<f64>> = samples.to_vec();
                    for _ in 0..extra {
                        atoms.push((0..dim).map(|_| rng.random_range(-spread..spread) * 1.5).collect());
                    }
                    let w: Vec<f64> = (0..atoms.len()).map(|_| rng.random::<f64>().powi(3)).collect();
                    let ws: f64 = w.iter().sum();
                    let p: Vec<f64> = w.iter().map(|v| v / ws).collect();
                    // signed measure P - Phat over the atoms
                    let mut diff = p.clone();
                    for d in diff.iter_mut().take(n) {
                        *d -= 1.0 / n as f64;
                    }
                    let k = kernel_matrix(&atoms, &kernel)?;
                    let dv = DVector::from_column_slice(&diff);
                    let mmd = dv.dot(&(&k * &dv)).max(0.0).sqrt();
                    if mmd <= 1e-12 {
                        continue;
                    }
                    let bias: f64 = atoms.iter().zip(&diff).map(|(a, d)| d * c.value(x, a)).sum();
                    best = best.max(epsilon * bias / mmd);
                }
            }
            Ok(BiasReport {
                bound,
                best_found: best,
                violation: (best - bound).max(0.0),
            })
        }
    }
}
