//! Ambiguity-set sizing: MMD concentration radius, shift-aware verification
//! radius, and the scenario count bound.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{mmd_distance, KernelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    LemmaBound,
    VerifyBound,
    Manual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityRadius {
    pub epsilon: f64,
    pub provenance: Provenance,
    pub confidence: Option<f64>,
    pub sample_count: Option<usize>,
}

impl AmbiguityRadius {
    pub fn manual(epsilon: f64) -> Result<Self> {
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::input(format!("radius must be finite and nonnegative, got {epsilon}")));
        }
        Ok(AmbiguityRadius {
            epsilon,
            provenance: Provenance::Manual,
            confidence: None,
            sample_count: None,
        })
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::input(format!("{name} must lie in (0, 1), got {v}")))
    }
}

/// `sqrt(C/N) + sqrt(2 C ln(1/alpha) / N)`: with probability at least
/// `1 - alpha` the empirical measure of `N` samples is this close in MMD.
pub fn mmd_radius_bound(n: usize, alpha: f64, c: f64) -> Result<AmbiguityRadius> {
    if n == 0 {
        return Err(Error::input("sample count must be positive"));
    }
    check_unit("alpha", alpha)?;
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::input(format!("kernel bound C must be positive, got {c}")));
    }
    let nf = n as f64;
    let epsilon = (c / nf).sqrt() + (2.0 * c * (1.0 / alpha).ln() / nf).sqrt();
    Ok(AmbiguityRadius {
        epsilon,
        provenance: Provenance::LemmaBound,
        confidence: Some(alpha),
        sample_count: Some(n),
    })
}

/// Draw `k` of `points` without replacement, keeping their original order.
fn subsample(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, points.len(), k).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| points[i].clone()).collect()
}

/// Concentration radius plus the estimated train/test MMD. Sample sets of
/// unequal size are matched by subsampling the larger one with `seed`.
pub fn verify_radius(
    n: usize,
    alpha: f64,
    train: &[Vec<f64>],
    test: &[Vec<f64>],
    spec: &KernelSpec,
    seed: u64,
) -> Result<AmbiguityRadius> {
    let base = mmd_radius_bound(n, alpha, spec.sup_diagonal())?;
    let k = train.len().min(test.len());
    let shift = if train.len() == test.len() {
        mmd_distance(train, test, spec)?
    } else if train.len() > k {
        mmd_distance(&subsample(train, k, seed), test, spec)?
    } else {
        mmd_distance(train, &subsample(test, k, seed), spec)?
    };
    Ok(AmbiguityRadius {
        epsilon: base.epsilon + shift,
        provenance: Provenance::VerifyBound,
        ..base
    })
}

/// Right-hand side `(2/(1-alpha)) ((d-1) ln 2 - ln beta)` of the scenario bound.
pub fn scenario_bound_rhs(alpha: f64, beta: f64, d: usize) -> Result<f64> {
    check_unit("alpha", alpha)?;
    check_unit("beta", beta)?;
    if d == 0 {
        return Err(Error::input("decision dimension d must be at least 1"));
    }
    Ok(2.0 / (1.0 - alpha) * ((d as f64 - 1.0) * std::f64::consts::LN_2 - beta.ln()))
}

/// Smallest integer count satisfying the scenario bound, at least one.
pub fn scenario_count(alpha: f64, beta: f64, d: usize) -> Result<usize> {
    let rhs = scenario_bound_rhs(alpha, beta, d)?;
    Ok((rhs.ceil() as usize).max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    Ceil,
    Floor,
    Nearest,
}

impl Rounding {
    fn apply(self, v: f64) -> usize {
        let r = match self {
            Rounding::Ceil => v.ceil(),
            Rounding::Floor => v.floor(),
            Rounding::Nearest => v.round(),
        };
        (r as usize).max(1)
    }
}

/// Every `(d, rounding)` with `d <= max_d` whose rounded bound equals `target`.
/// Used to document which convention reproduces a published count.
pub fn conventions_matching(
    alpha: f64,
    beta: f64,
    target: usize,
    max_d: usize,
) -> Result<Vec<(usize, Rounding)>> {
    let mut out = Vec::new();
    for d in 1..=max_d {
        let rhs = scenario_bound_rhs(alpha, beta, d)?;
        for r in [Rounding::Ceil, Rounding::Floor, Rounding::Nearest] {
            if r.apply(rhs) == target {
                out.push((d, r));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn lemma_radius_examples() {
        let r = mmd_radius_bound(34, 0.05, 1.0).unwrap();
        let oracle = (1.0f64 / 34.0).sqrt() + (2.0 * 20f64.ln() / 34.0).sqrt();
        assert_abs_diff_eq!(r.epsilon, oracle, epsilon = 1e-15);
        assert_abs_diff_eq!(r.epsilon, 0.591284, epsilon = 1e-6);
        assert_eq!(r.provenance, Provenance::LemmaBound);
        assert_eq!(r.sample_count, Some(34));

        let a = mmd_radius_bound(10, 0.1, 1.0).unwrap().epsilon;
        let b = mmd_radius_bound(40, 0.1, 1.0).unwrap().epsilon;
        assert_eq!(a / 2.0, b);

        let near_one = mmd_radius_bound(34, 0.999999, 1.0).unwrap().epsilon;
        assert_abs_diff_eq!(near_one, (1.0f64 / 34.0).sqrt(), epsilon = 1e-3);
    }

    #[test]
    fn lemma_radius_monotone() {
        let mut prev = f64::INFINITY;
        for n in 1..200 {
            let e = mmd_radius_bound(n, 0.05, 1.0).unwrap().epsilon;
            assert!(e < prev);
            prev = e;
        }
        let mut prev = 0.0;
        for a in [0.9, 0.5, 0.1, 0.01, 0.001] {
            let e = mmd_radius_bound(34, a, 1.0).unwrap().epsilon;
            assert!(e > prev);
            prev = e;
        }
    }

    #[test]
    fn lemma_radius_rejects_bad_input() {
        assert!(mmd_radius_bound(0, 0.05, 1.0).unwrap_err().is_input());
        assert!(mmd_radius_bound(10, 1.0, 1.0).is_err());
        assert!(mmd_radius_bound(10, 0.0, 1.0).is_err());
        assert!(mmd_radius_bound(10, 0.5, 0.0).is_err());
    }

    #[test]
    fn verify_radius_examples() {
        let spec = KernelSpec::gaussian(1.0).unwrap();
        let xs: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 * 0.1, 1.0]).collect();
        let same = verify_radius(34, 0.05, &xs, &xs, &spec, 0).unwrap();
        assert_abs_diff_eq!(same.epsilon, mmd_radius_bound(34, 0.05, 1.0).unwrap().epsilon, epsilon = 1e-15);
        assert_eq!(same.provenance, Provenance::VerifyBound);

        let shifted: Vec<Vec<f64>> = xs.iter().map(|p| vec![p[0] + 0.7, p[1]]).collect();
        let r = verify_radius(34, 0.05, &xs, &shifted, &spec, 0).unwrap();
        let shift = mmd_distance(&xs, &shifted, &spec).unwrap();
        assert!(shift > 0.0);
        assert_abs_diff_eq!(r.epsilon, 0.591284 + shift, epsilon = 1e-6);
    }

    #[test]
    fn verify_radius_subsamples_deterministically() {
        let spec = KernelSpec::gaussian(1.0).unwrap();
        let a: Vec<Vec<f64>> = (0..30).map(|i| vec![(i as f64).sin()]).collect();
        let b: Vec<Vec<f64>> = (0..12).map(|i| vec![(i as f64).cos() + 0.3]).collect();
        let r1 = verify_radius(34, 0.05, &a, &b, &spec, 9).unwrap();
        let r2 = verify_radius(34, 0.05, &a, &b, &spec, 9).unwrap();
        let r3 = verify_radius(34, 0.05, &b, &a, &spec, 9).unwrap();
        assert_eq!(r1.epsilon, r2.epsilon);
        assert!(r1.epsilon >= mmd_radius_bound(34, 0.05, 1.0).unwrap().epsilon);
        assert_abs_diff_eq!(r1.epsilon, r3.epsilon, epsilon = 1e-12);
    }

    #[test]
    fn scenario_count_examples() {
        let rhs = scenario_bound_rhs(0.85, 0.15, 2).unwrap();
        assert_abs_diff_eq!(rhs, 2.0 / 0.15 * (2f64.ln() - 0.15f64.ln()), epsilon = 1e-12);
        assert_abs_diff_eq!(rhs, 34.54, epsilon = 5e-3);
        assert_eq!(scenario_count(0.85, 0.15, 2).unwrap(), 35);
        assert_eq!(scenario_count(0.5, 0.5, 1).unwrap(), 3);
        assert_eq!(scenario_count(0.5, 0.999999, 1).unwrap(), 1);
    }

    #[test]
    fn scenario_count_monotone() {
        for d in 1..10 {
            assert!(scenario_count(0.85, 0.15, d + 1).unwrap() >= scenario_count(0.85, 0.15, d).unwrap());
        }
        assert!(scenario_count(0.85, 0.05, 2).unwrap() >= scenario_count(0.85, 0.15, 2).unwrap());
        assert!(scenario_count(0.9, 0.15, 2).unwrap() >= scenario_count(0.85, 0.15, 2).unwrap());
    }

    #[test]
    fn published_count_needs_floor() {
        let m = conventions_matching(0.85, 0.15, 34, 10).unwrap();
        assert_eq!(m, vec![(2, Rounding::Floor)]);
    }

    #[test]
    fn scenario_count_rejects_bad_input() {
        assert!(scenario_count(1.0, 0.15, 2).is_err());
        assert!(scenario_count(0.85, 0.0, 2).is_err());
        assert!(scenario_count(0.85, 0.15, 0).is_err());
    }
}
