//! Runtime invariant suites shared by the `selftest` command and the tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::ambiguity::{mmd_radius_bound, scenario_bound_rhs, scenario_count};
use crate::constraints::{builtin_constraints, gradient_tightening, scenario_tightening, AffineConstraint, ConstraintSpec, UncertainConstraint};
use crate::kernel::{kernel_eval, mmd_unbiased, KernelSpec};
use crate::nlp::{finite_difference_gradient, solve, NlpProblem, Oracle, SolveStatus};
use crate::svm::{synthetic_exp_dataset, train_svm, SvmConstraint};

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub status: SolveStatus,
    pub kkt_residual: f64,
    pub solution_error: f64,
    pub objective_error: f64,
}

/// Solve every analytic case at `tolerance`.
pub fn solver_suite(tolerance: f64) -> Vec<SuiteResult> {
    analytic_suite()
        .into_iter()
        .map(|case| match solve(&case.problem, tolerance, 200) {
            Ok(rep) => SuiteResult {
                name: case.name,
                status: rep.status,
                kkt_residual: rep.kkt_residual,
                solution_error: rep
                    .solution
                    .iter()
                    .zip(&case.solution)
                    .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs())),
                objective_error: (rep.objective - case.objective).abs(),
            },
            Err(_) => SuiteResult {
                name: case.name,
                status: SolveStatus::MaxIterations,
                kkt_residual: f64::INFINITY,
                solution_error: f64::INFINITY,
                objective_error: f64::INFINITY,
            },
        })
        .collect()
}

/// `max |analytic - central difference| / max(|central difference|, 1e-6)`
/// of the xi-gradient over `samples` random points.
pub fn xi_gradient_error(c: &dyn UncertainConstraint, x_range: f64, xi_range: f64, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = c.dim();
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-x_range..x_range)).collect();
        let xi: Vec<f64> = (0..d).map(|_| rng.random_range(-xi_range..xi_range)).collect();
        let fd = finite_difference_gradient(|p| c.value(&x, p), &xi, 1e-5);
        let scale = fd.iter().fold(1e-6f64, |m, v| m.max(v.abs()));
        let err = c.grad_xi(&x, &xi).iter().zip(&fd).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        worst = worst.max(err / scale);
    }
    worst
}

/// The constraints with analytic xi-gradients: both linear branches, the
/// exponential constraint and an SVM trained on the synthetic data set.
pub fn audited_constraints() -> Vec<ConstraintSpec> {
    let b = builtin_constraints();
    let mut out: Vec<ConstraintSpec> = vec![b.lin[0].clone(), b.lin[1].clone(), b.exp.clone()];
    let (data, labels) = synthetic_exp_dataset(120, 0.3, 5);
    if let Ok(model) = KernelSpec::gaussian(2.0).and_then(|k| train_svm(&data, &labels, k, 100.0)) {
        if let Ok(c) = SvmConstraint::new(model) {
            out.push(std::sync::Arc::new(c));
        }
    }
    out
}

fn naive_mmd(x: &[Vec<f64>], y: &[Vec<f64>], k: &KernelSpec) -> f64 {
    let kk = |a: &[f64], b: &[f64]| kernel_eval(a, b, k).expect("same dimension");
    let n = x.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += kk(&x[i], &x[j]) + kk(&y[i], &y[j]) - kk(&x[i], &y[j]) - kk(&x[j], &y[i]);
            }
        }
    }
    total / (n as f64 * (n as f64 - 1.0))
}

/// Run every invariant suite.
pub fn run_selftest() -> Vec<Check> {
    let mut checks = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);

    let kernel = KernelSpec::gaussian(1.3).expect("positive bandwidth");
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..=50);
        let mut pts = |c: usize| -> Vec<Vec<f64>> {
            (0..c).map(|_| (0..2).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
        };
        let (x, y) = (pts(n), pts(n));
        let lib = mmd_unbiased(&x, &y, &kernel).unwrap_or(f64::NAN);
        worst = worst.max((lib - naive_mmd(&x, &y, &kernel)).abs());
    }
    checks.push(Check::new("mmd matches naive double loop", worst <= 1e-12, format!("max diff {worst:e}")));

    let r = mmd_radius_bound(34, 0.05, 1.0).map(|r| r.epsilon).unwrap_or(f64::NAN);
    let r4 = mmd_radius_bound(136, 0.05, 1.0).map(|r| r.epsilon).unwrap_or(f64::NAN);
    checks.push(Check::new(
        "radius halves when n quadruples",
        (r - 2.0 * r4).abs() <= 1e-12,
        format!("eps(34) = {r:.6}, eps(136) = {r4:.6}"),
    ));

    let rhs = scenario_bound_rhs(0.85, 0.15, 2).unwrap_or(f64::NAN);
    let count = scenario_count(0.85, 0.15, 2).unwrap_or(0);
    checks.push(Check::new(
        "scenario count is the ceiling of the bound",
        count as f64 == rhs.ceil(),
        format!("rhs {rhs:.6}, count {count}"),
    ));

    let mut worst = 0.0f64;
    for _ in 0..50 {
        let normal: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
        let c = AffineConstraint {
            label: "random".into(),
            normal: normal.clone(),
            offset: rng.random_range(-2.0..2.0),
        };
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
        let s: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let eps = rng.random_range(0.0..2.0);
        let norm = normal.iter().map(|v| v * v).sum::<f64>().sqrt();
        let reg = gradient_tightening(&c, &x, &s, eps).unwrap_or(f64::NAN) - scenario_tightening(&c, &x, &s).unwrap_or(f64::NAN);
        worst = worst.max((reg - eps * norm).abs());
    }
    checks.push(Check::new("affine regularizer equals eps ||h||", worst <= 1e-12, format!("max diff {worst:e}")));

    for r in solver_suite(1e-8) {
        let ok = r.status == SolveStatus::Optimal && r.kkt_residual <= 1e-6 && r.solution_error <= 1e-6;
        checks.push(Check::new(
            format!("solver: {}", r.name),
            ok,
            format!("kkt {:e}, solution error {:e}", r.kkt_residual, r.solution_error),
        ));
    }

    for c in audited_constraints() {
        let (xr, xir) = if c.label().starts_with("svm") { (8.0, 1.0) } else { (20.0, 2.0) };
        let err = xi_gradient_error(c.as_ref(), xr, xir, 50, 17);
        checks.push(Check::new(
            format!("xi-gradient audit: {}", c.label()),
            err < 1e-5,
            format!("max relative error {err:e}"),
        ));
    }
    checks
}

pub(crate) fn oracle<F, G>(f: F, g: G) -> Oracle
where
    F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    G: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
{
    Box::new(move |x, grad| {
        if let Some(out) = grad {
            g(x, out);
        }
        f(x)
    })
}

pub(crate) fn affine(a: Vec<f64>, b: f64) -> Oracle {
    let a2 = a.clone();
    oracle(
        move |x| a.iter().zip(x).map(|(ai, xi)| ai * xi).sum::<f64>() - b,
        move |_, g| g.copy_from_slice(&a2),
    )
}

/// NLP with a known minimizer.
pub struct AnalyticCase {
    pub name: &'static str,
    pub problem: NlpProblem,
    pub solution: Vec<f64>,
    pub objective: f64,
}

pub fn analytic_suite() -> Vec<AnalyticCase> {
    let mut cases = Vec::new();

    cases.push(AnalyticCase {
        name: "unconstrained sphere",
        problem: NlpProblem::new(
            3,
            oracle(
                |x| x.iter().map(|v| v * v).sum(),
                |x, g| {
                    for (gi, xi) in g.iter_mut().zip(x) {
                        *gi = 2.0 * xi;
                    }
                },
            ),
            vec![1.0, -2.0, 0.5],
        ),
        solution: vec![0.0; 3],
        objective: 0.0,
    });

    cases.push(AnalyticCase {
        name: "halfplane projection",
        problem: NlpProblem::new(
            2,
            oracle(
                |x| (x[0] - 1.0).powi(2) + (x[1] - 2.0).powi(2),
                |x, g| {
                    g[0] = 2.0 * (x[0] - 1.0);
                    g[1] = 2.0 * (x[1] - 2.0);
                },
            ),
            vec![0.0, 0.0],
        )
        .constraint(affine(vec![1.0, 1.0], 1.0)),
        solution: vec![0.0, 1.0],
        objective: 2.0,
    });

    let r = std::f64::consts::FRAC_1_SQRT_2;
    cases.push(AnalyticCase {
        name: "linear over disk",
        problem: NlpProblem::new(
            2,
            oracle(|x| -x[0] - x[1], |_, g| g.copy_from_slice(&[-1.0, -1.0])),
            vec![0.1, -0.3],
        )
        .constraint(oracle(
            |x| x[0] * x[0] + x[1] * x[1] - 1.0,
            |x, g| {
                g[0] = 2.0 * x[0];
                g[1] = 2.0 * x[1];
            },
        )),
        solution: vec![r, r],
        objective: -2.0 * r,
    });

    cases.push(AnalyticCase {
        name: "rosenbrock with bound",
        problem: NlpProblem::new(
            2,
            oracle(
                |x| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2),
                |x, g| {
                    g[0] = -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]);
                    g[1] = 200.0 * (x[1] - x[0] * x[0]);
                },
            ),
            vec![-1.2, 1.0],
        )
        .constraint(affine(vec![1.0, 0.0], 0.5)),
        solution: vec![0.5, 0.25],
        objective: 0.25,
    });

    cases.push(AnalyticCase {
        name: "hs21",
        problem: NlpProblem::new(
            2,
            oracle(
                |x| 0.01 * x[0] * x[0] + x[1] * x[1] - 100.0,
                |x, g| {
                    g[0] = 0.02 * x[0];
                    g[1] = 2.0 * x[1];
                },
            ),
            vec![10.0, -1.0],
        )
        .constraint(affine(vec![-10.0, 1.0], -10.0))
        .constraint(affine(vec![-1.0, 0.0], -2.0))
        .constraint(affine(vec![1.0, 0.0], 50.0))
        .constraint(affine(vec![0.0, -1.0], 50.0))
        .constraint(affine(vec![0.0, 1.0], 50.0)),
        solution: vec![2.0, 0.0],
        objective: -99.96,
    });

    // largest circle (cx, cy, r) inside the unit square
    cases.push(AnalyticCase {
        name: "circle in square",
        problem: NlpProblem::new(3, oracle(|x| -x[2], |_, g| g[2] = -1.0), vec![0.2, 0.7, 0.0])
            .constraint(affine(vec![-1.0, 0.0, 1.0], 0.0))
            .constraint(affine(vec![1.0, 0.0, 1.0], 1.0))
            .constraint(affine(vec![0.0, -1.0, 1.0], 0.0))
            .constraint(affine(vec![0.0, 1.0, 1.0], 1.0)),
        solution: vec![0.5, 0.5, 0.5],
        objective: -0.5,
    });

    cases.push(AnalyticCase {
        name: "box qp",
        problem: NlpProblem::new(
            2,
            oracle(
                |x| (x[0] - 3.0).powi(2) + (x[1] + 1.0).powi(2),
                |x, g| {
                    g[0] = 2.0 * (x[0] - 3.0);
                    g[1] = 2.0 * (x[1] + 1.0);
                },
            ),
            vec![1.0, 1.0],
        )
        .constraint(affine(vec![-1.0, 0.0], 0.0))
        .constraint(affine(vec![1.0, 0.0], 2.0))
        .constraint(affine(vec![0.0, -1.0], 0.0))
        .constraint(affine(vec![0.0, 1.0], 2.0)),
        solution: vec![2.0, 0.0],
        objective: 2.0,
    });

    cases.push(AnalyticCase {
        name: "hs35",
        problem: hs35(vec![0.5, 0.5, 0.5]),
        solution: vec![4.0 / 3.0, 7.0 / 9.0, 4.0 / 9.0],
        objective: 1.0 / 9.0,
    });

    cases.push(AnalyticCase {
        name: "parabola and line",
        problem: NlpProblem::new(
            2,
            oracle(
                |x| (x[0] - 2.0).powi(2) + (x[1] - 1.0).powi(2),
                |x, g| {
                    g[0] = 2.0 * (x[0] - 2.0);
                    g[1] = 2.0 * (x[1] - 1.0);
                },
            ),
            vec![0.0, 0.0],
        )
        .constraint(oracle(
            |x| x[0] * x[0] - x[1],
            |x, g| {
                g[0] = 2.0 * x[0];
                g[1] = -1.0;
            },
        ))
        .constraint(affine(vec![1.0, 1.0], 2.0)),
        solution: vec![1.0, 1.0],
        objective: 1.0,
    });

    cases.push(AnalyticCase {
        name: "min norm on halfspace",
        problem: NlpProblem::new(
            3,
            oracle(
                |x| x.iter().map(|v| v * v).sum(),
                |x, g| {
                    for (gi, xi) in g.iter_mut().zip(x) {
                        *gi = 2.0 * xi;
                    }
                },
            ),
            vec![0.0; 3],
        )
        .constraint(affine(vec![-1.0, -2.0, -3.0], -1.0)),
        solution: vec![1.0 / 14.0, 2.0 / 14.0, 3.0 / 14.0],
        objective: 1.0 / 14.0,
    });

    cases
}

pub(crate) fn hs35(x0: Vec<f64>) -> NlpProblem {
    NlpProblem::new(
        3,
        oracle(
            |x| {
                9.0 - 8.0 * x[0] - 6.0 * x[1] - 4.0 * x[2]
                    + 2.0 * x[0] * x[0]
                    + 2.0 * x[1] * x[1]
                    + x[2] * x[2]
                    + 2.0 * x[0] * x[1]
                    + 2.0 * x[0] * x[2]
            },
            |x, g| {
                g[0] = -8.0 + 4.0 * x[0] + 2.0 * x[1] + 2.0 * x[2];
                g[1] = -6.0 + 4.0 * x[1] + 2.0 * x[0];
                g[2] = -4.0 + 2.0 * x[2] + 2.0 * x[0];
            },
        ),
        x0,
    )
    .constraint(affine(vec![1.0, 1.0, 2.0], 3.0))
    .constraint(affine(vec![-1.0, 0.0, 0.0], 0.0))
    .constraint(affine(vec![0.0, -1.0, 0.0], 0.0))
    .constraint(affine(vec![0.0, 0.0, -1.0], 0.0))
}
