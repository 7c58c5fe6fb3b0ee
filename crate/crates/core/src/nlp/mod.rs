//! Dense SQP for small smooth inequality-constrained programs.
//!
//! Each iteration solves a convex QP built from a damped-BFGS model of the
//! Lagrangian Hessian and the linearized constraints, then backtracks on the
//! l1 merit function `f + nu * sum max(0, c_i)`. A second-order correction
//! is tried once when the full step is rejected.

pub mod qp;

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar oracle: returns the value and, when a buffer is given, writes the
/// gradient into it. The buffer arrives zeroed.
pub type Oracle = Box<dyn Fn(&[f64], Option<&mut [f64]>) -> f64 + Send + Sync>;

/// `min f(x)  s.t.  c_i(x) <= 0`.
pub struct NlpProblem {
    pub variable_count: usize,
    pub objective: Oracle,
    pub inequality_constraints: Vec<Oracle>,
    pub initial_guess: Vec<f64>,
    /// Seed for the quasi-Newton matrix; identity when absent.
    pub initial_hessian: Option<DMatrix<f64>>,
}

impl fmt::Debug for NlpProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NlpProblem")
            .field("variable_count", &self.variable_count)
            .field("constraints", &self.inequality_constraints.len())
            .finish()
    }
}

impl NlpProblem {
    pub fn new(variable_count: usize, objective: Oracle, initial_guess: Vec<f64>) -> Self {
        NlpProblem {
            variable_count,
            objective,
            inequality_constraints: Vec::new(),
            initial_guess,
            initial_hessian: None,
        }
    }

    pub fn constraint(mut self, c: Oracle) -> Self {
        self.inequality_constraints.push(c);
        self
    }

    /// Constraint values at `x`.
    pub fn constraint_values(&self, x: &[f64]) -> Vec<f64> {
        self.inequality_constraints.iter().map(|c| c(x, None)).collect()
    }

    pub fn max_violation(&self, x: &[f64]) -> f64 {
        self.constraint_values(x).into_iter().fold(0.0, |m, c| m.max(c))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    MaxIterations,
    LineSearchFailure,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub solution: Vec<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub kkt_residual: f64,
    pub max_violation: f64,
    pub multipliers: Vec<f64>,
    pub iterations: usize,
    /// Final quasi-Newton matrix, reusable as a warm start.
    pub hessian: DMatrix<f64>,
    /// Merit value before and after each accepted step, under the penalty
    /// in force for that step.
    pub merit_history: Vec<[f64; 2]>,
    /// Smallest eigenvalue of the quasi-Newton matrix over the run.
    pub min_hessian_eigenvalue: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Record the smallest BFGS eigenvalue at every update (costly).
    pub track_hessian_spectrum: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tolerance: 1e-6,
            max_iterations: 200,
            track_hessian_spectrum: false,
        }
    }
}

struct Evaluation {
    f: f64,
    grad: DVector<f64>,
    c: DVector<f64>,
    /// `n x m`, constraint gradients as columns.
    jac_t: DMatrix<f64>,
}

fn evaluate(problem: &NlpProblem, x: &[f64]) -> Evaluation {
    let n = problem.variable_count;
    let m = problem.inequality_constraints.len();
    let mut grad = DVector::zeros(n);
    let f = (problem.objective)(x, Some(grad.as_mut_slice()));
    let mut jac_t = DMatrix::zeros(n, m);
    let mut c = DVector::zeros(m);
    for (i, con) in problem.inequality_constraints.iter().enumerate() {
        let mut col = jac_t.column_mut(i);
        c[i] = con(x, Some(col.as_mut_slice()));
    }
    Evaluation { f, grad, c, jac_t }
}

fn values(problem: &NlpProblem, x: &[f64]) -> (f64, DVector<f64>) {
    let f = (problem.objective)(x, None);
    let c = DVector::from_iterator(
        problem.inequality_constraints.len(),
        problem.inequality_constraints.iter().map(|con| con(x, None)),
    );
    (f, c)
}

fn violation_sum(c: &DVector<f64>) -> f64 {
    c.iter().map(|v| v.max(0.0)).sum()
}

fn violation_max(c: &DVector<f64>) -> f64 {
    c.iter().fold(0.0, |m, v| m.max(*v))
}

fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// KKT residual at `x` for multipliers `lambda`: the largest of the
/// stationarity, primal violation and complementarity infinity norms.
fn kkt_residual(ev: &Evaluation, lambda: &DVector<f64>) -> f64 {
    let stat = &ev.grad + &ev.jac_t * lambda;
    let comp = ev
        .c
        .iter()
        .zip(lambda.iter())
        .fold(0.0f64, |m, (c, l)| m.max((c * l).abs()));
    stat.amax().max(violation_max(&ev.c)).max(comp)
}

/// Solve the local QP `min 1/2 d'Bd + g'd  s.t.  c + J d <= 0`, falling back to
/// an elastic version `c + J d <= s, s >= 0` with penalty `elastic_weight * s`
/// when the linearization is inconsistent.
fn solve_subproblem(
    hessian: &DMatrix<f64>,
    grad: &DVector<f64>,
    jac_t: &DMatrix<f64>,
    c: &DVector<f64>,
    elastic_weight: f64,
) -> std::result::Result<(DVector<f64>, DVector<f64>, bool), qp::QpError> {
    let normals = -jac_t;
    match qp::solve(hessian, grad, &normals, c) {
        Ok(sol) => Ok((sol.x, sol.multipliers, false)),
        Err(qp::QpError::Infeasible) => {
            let n = hessian.nrows();
            let m = c.len();
            let mut h = DMatrix::zeros(n + 1, n + 1);
            h.view_mut((0, 0), (n, n)).copy_from(hessian);
            let scale = hessian.diagonal().amax().max(1.0);
            h[(n, n)] = 1e-6 * scale;
            let mut g = DVector::zeros(n + 1);
            g.rows_mut(0, n).copy_from(grad);
            g[n] = elastic_weight;
            let mut nrm = DMatrix::zeros(n + 1, m + 1);
            nrm.view_mut((0, 0), (n, m)).copy_from(&normals);
            for i in 0..m {
                nrm[(n, i)] = 1.0;
            }
            nrm[(n, m)] = 1.0;
            let mut b = DVector::zeros(m + 1);
            b.rows_mut(0, m).copy_from(c);
            let sol = qp::solve(&h, &g, &nrm, &b)?;
            Ok((
                sol.x.rows(0, n).into_owned(),
                sol.multipliers.rows(0, m).into_owned(),
                true,
            ))
        }
        Err(e) => Err(e),
    }
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigenvalues()
        .iter()
        .fold(f64::INFINITY, |a, b| a.min(*b))
}

/// Powell-damped BFGS update keeping `b` positive definite.
fn damped_bfgs(b: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) {
    let bs = &*b * s;
    let sbs = s.dot(&bs);
    if !(sbs > 1e-16) {
        return;
    }
    let sy = s.dot(y);
    let y = if sy >= 0.2 * sbs {
        y.clone()
    } else {
        let theta = 0.8 * sbs / (sbs - sy);
        y * theta + &bs * (1.0 - theta)
    };
    let sy = s.dot(&y);
    if !(sy > 1e-16) {
        return;
    }
    b.ger(1.0 / sy, &y, &y, 1.0);
    b.ger(-1.0 / sbs, &bs, &bs, 1.0);
    // keep exact symmetry against roundoff drift
    let bt = b.transpose();
    *b += bt;
    *b *= 0.5;
}

/// Solve `problem` by SQP with default options apart from tolerance and
/// iteration cap.
pub fn solve(problem: &NlpProblem, tolerance: f64, max_iterations: usize) -> Result<SolveReport> {
    solve_with(
        problem,
        &SolverOptions {
            tolerance,
            max_iterations,
            ..SolverOptions::default()
        },
    )
}

pub fn solve_with(problem: &NlpProblem, opts: &SolverOptions) -> Result<SolveReport> {
    let n = problem.variable_count;
    let m = problem.inequality_constraints.len();
    if problem.initial_guess.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: problem.initial_guess.len(),
        });
    }
    if !(opts.tolerance > 0.0) || opts.max_iterations == 0 {
        return Err(Error::input("tolerance and iteration cap must be positive"));
    }

    let mut x = DVector::from_column_slice(&problem.initial_guess);
    let mut ev = evaluate(problem, x.as_slice());
    if !ev.f.is_finite() || !all_finite(&ev.grad) || !all_finite(&ev.c) {
        return Err(Error::input("oracles are not finite at the initial guess"));
    }

    let mut hessian = match &problem.initial_hessian {
        Some(h) if h.nrows() == n && h.ncols() == n => h.clone(),
        Some(h) => {
            return Err(Error::Dimension {
                expected: n,
                got: h.nrows(),
            })
        }
        None => DMatrix::identity(n, n),
    };
    let mut min_eig = if opts.track_hessian_spectrum {
        min_eigenvalue(&hessian)
    } else {
        f64::NAN
    };

    let mut lambda = DVector::zeros(m);
    let mut penalty: Option<f64> = None;
    let mut merit_history = Vec::new();
    let tol = opts.tolerance;

    let report = |x: &DVector<f64>,
                  ev: &Evaluation,
                  lambda: &DVector<f64>,
                  status: SolveStatus,
                  iterations: usize,
                  hessian: DMatrix<f64>,
                  merit_history: Vec<[f64; 2]>,
                  min_eig: f64| {
        let kkt = kkt_residual(ev, lambda);
        SolveReport {
            solution: x.as_slice().to_vec(),
            objective: ev.f,
            status,
            kkt_residual: kkt,
            max_violation: violation_max(&ev.c),
            multipliers: lambda.as_slice().to_vec(),
            iterations,
            hessian,
            merit_history,
            min_hessian_eigenvalue: min_eig,
        }
    };

    for iter in 0..opts.max_iterations {
        let qp_out = solve_subproblem(
            &hessian,
            &ev.grad,
            &ev.jac_t,
            &ev.c,
            penalty.unwrap_or(1.0).max(1.0) * 10.0,
        );
        let (d, lam_qp, elastic) = match qp_out {
            Ok(v) => v,
            Err(qp::QpError::NotPositiveDefinite) => {
                hessian = DMatrix::identity(n, n) * hessian.diagonal().amax().max(1.0);
                continue;
            }
            Err(_) => {
                return Ok(report(
                    &x,
                    &ev,
                    &lambda,
                    SolveStatus::Infeasible,
                    iter,
                    hessian,
                    merit_history,
                    min_eig,
                ));
            }
        };

        // KKT test at the current point with the fresh QP multipliers
        if !elastic && kkt_residual(&ev, &lam_qp) <= tol {
            return Ok(report(
                &x,
                &ev,
                &lam_qp,
                SolveStatus::Optimal,
                iter,
                hessian,
                merit_history,
                min_eig,
            ));
        }

        let lam_max = lam_qp.amax();
        let nu = match penalty {
            None => 10.0 * lam_max.max(1e-2),
            Some(mut nu) => {
                while nu < 1.1 * lam_max {
                    nu *= 10.0;
                }
                nu
            }
        };
        penalty = Some(nu);

        let merit = |f: f64, c: &DVector<f64>| f + nu * violation_sum(c);
        let phi0 = merit(ev.f, &ev.c);
        let mut slope = ev.grad.dot(&d) - nu * violation_sum(&ev.c);
        if elastic || slope >= 0.0 {
            // fall back to the exact directional derivative of the merit
            let lin = &ev.c + ev.jac_t.tr_mul(&d);
            slope = ev.grad.dot(&d) + nu * (violation_sum(&lin) - violation_sum(&ev.c));
        }
        if slope >= 0.0 && d.amax() <= 1e-14 * (1.0 + x.amax()) {
            // no progress possible from the model
            let status = if elastic {
                SolveStatus::Infeasible
            } else {
                SolveStatus::LineSearchFailure
            };
            return Ok(report(&x, &ev, &lambda, status, iter, hessian, merit_history, min_eig));
        }

        // backtracking with one second-order correction attempt
        let mut alpha = 1.0;
        let mut accepted: Option<DVector<f64>> = None;
        let mut tried_soc = false;
        while alpha > 1e-10 {
            let trial = &x + &d * alpha;
            let (ft, ct) = values(problem, trial.as_slice());
            if ft.is_finite() && all_finite(&ct) && merit(ft, &ct) <= phi0 + 1e-4 * alpha * slope.min(0.0)
            {
                accepted = Some(trial);
                break;
            }
            if alpha == 1.0 && !tried_soc && ft.is_finite() && all_finite(&ct) {
                tried_soc = true;
                let shifted = &ct - ev.jac_t.tr_mul(&d);
                if let Ok((dc, _, false)) =
                    solve_subproblem(&hessian, &ev.grad, &ev.jac_t, &shifted, nu * 10.0)
                {
                    let trial = &x + &dc;
                    let (fs, cs) = values(problem, trial.as_slice());
                    if fs.is_finite() && all_finite(&cs) && merit(fs, &cs) <= phi0 + 1e-4 * slope.min(0.0) {
                        accepted = Some(trial);
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }

        let Some(x_new) = accepted else {
            return Ok(report(
                &x,
                &ev,
                &lambda,
                SolveStatus::LineSearchFailure,
                iter,
                hessian,
                merit_history,
                min_eig,
            ));
        };

        let ev_new = evaluate(problem, x_new.as_slice());
        lambda = if alpha >= 1.0 {
            lam_qp
        } else {
            &lambda + (&lam_qp - &lambda) * alpha
        };
        let s = &x_new - &x;
        let y = (&ev_new.grad + &ev_new.jac_t * &lambda) - (&ev.grad + &ev.jac_t * &lambda);
        damped_bfgs(&mut hessian, &s, &y);
        if opts.track_hessian_spectrum {
            min_eig = min_eig.min(min_eigenvalue(&hessian));
        }
        merit_history.push([phi0, merit(ev_new.f, &ev_new.c)]);
        x = x_new;
        ev = ev_new;
    }

    // final check with the latest multipliers
    let status = if kkt_residual(&ev, &lambda) <= tol {
        SolveStatus::Optimal
    } else {
        SolveStatus::MaxIterations
    };
    Ok(report(
        &x,
        &ev,
        &lambda,
        status,
        opts.max_iterations,
        hessian,
        merit_history,
        min_eig,
    ))
}

/// Central-difference gradient of `f` at `point` with step `step`.
pub fn finite_difference_gradient<F>(f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut work = point.to_vec();
    (0..point.len())
        .map(|i| {
            let orig = work[i];
            work[i] = orig + step;
            let up = f(&work);
            work[i] = orig - step;
            let down = f(&work);
            work[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

#[cfg(test)]
mod tests;
