use super::*;
use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::selftest::{affine, analytic_suite as suite, hs35, oracle};

#[test]
fn analytic_suite() {
    for case in suite() {
        let rep = solve(&case.problem, 1e-8, 200).unwrap();
        assert_eq!(rep.status, SolveStatus::Optimal, "{}", case.name);
        assert!(rep.kkt_residual <= 1e-6, "{}: kkt {}", case.name, rep.kkt_residual);
        for (a, b) in rep.solution.iter().zip(&case.solution) {
            assert!((a - b).abs() <= 1e-6, "{}: {:?}", case.name, rep.solution);
        }
        assert_abs_diff_eq!(rep.objective, case.objective, epsilon = 1e-6);
    }
}

#[test]
fn halfplane_multiplier() {
    let case = suite().into_iter().find(|c| c.name == "halfplane projection").unwrap();
    let rep = solve(&case.problem, 1e-9, 100).unwrap();
    assert_abs_diff_eq!(rep.multipliers[0], 2.0, epsilon = 1e-6);
}

#[test]
fn unconstrained_sphere_is_fast() {
    let case = suite().into_iter().next().unwrap();
    let rep = solve(&case.problem, 1e-8, 100).unwrap();
    assert!(rep.iterations <= 2, "{}", rep.iterations);
}

#[test]
fn bfgs_stays_positive_definite_and_merit_decreases() {
    let opts = SolverOptions {
        tolerance: 1e-8,
        max_iterations: 200,
        track_hessian_spectrum: true,
        ..SolverOptions::default()
    };
    for case in suite() {
        let rep = solve_with(&case.problem, &opts).unwrap();
        assert!(rep.min_hessian_eigenvalue > 1e-10, "{}", case.name);
        assert!(!rep.merit_history.is_empty() || rep.iterations == 0);
        for [before, after] in &rep.merit_history {
            assert!(after <= before, "{}", case.name);
        }
    }
}

#[test]
fn random_starts_agree_on_convex_problem() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tol = 1e-7;
    let sols: Vec<Vec<f64>> = (0..5)
        .map(|_| {
            let x0 = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            solve(&hs35(x0), tol, 200).unwrap().solution
        })
        .collect();
    for s in &sols[1..] {
        for (a, b) in s.iter().zip(&sols[0]) {
            assert!((a - b).abs() <= 10.0 * tol);
        }
    }
}

#[test]
fn inconsistent_constraints_report_infeasible() {
    let p = NlpProblem::new(1, oracle(|x| x[0] * x[0], |x, g| g[0] = 2.0 * x[0]), vec![0.0])
        .constraint(affine(vec![1.0], -1.0))
        .constraint(affine(vec![-1.0], -1.0));
    let rep = solve(&p, 1e-8, 50).unwrap();
    assert_eq!(rep.status, SolveStatus::Infeasible);
}

#[test]
fn rejects_bad_initial_guess() {
    let p = NlpProblem::new(2, oracle(|x| x[0], |_, g| g[0] = 1.0), vec![0.0]);
    assert!(solve(&p, 1e-6, 10).unwrap_err().is_input());
}

#[test]
fn finite_differences() {
    let lin = finite_difference_gradient(|p| 3.0 * p[0] - 2.0 * p[1], &[0.3, 7.0], 0.5);
    assert_abs_diff_eq!(lin[0], 3.0, epsilon = 1e-12);
    assert_abs_diff_eq!(lin[1], -2.0, epsilon = 1e-12);
    let quad = finite_difference_gradient(|p| p[0] * p[0] + p[1] * p[1], &[1.0, 2.0], 1e-5);
    assert_abs_diff_eq!(quad[0], 2.0, epsilon = 1e-8);
    assert_abs_diff_eq!(quad[1], 4.0, epsilon = 1e-8);
}
