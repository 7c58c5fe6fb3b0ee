//! Gaussian RKHS primitives.
//!
//! Everything kernel-related (kernel matrices, the unbiased MMD estimate,
//! finite RKHS expansions and their norms) is driven by a single
//! [`KernelSpec`], so the bandwidth used to build a constraint block is the
//! same one used to audit it afterwards.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Gaussian,
}

/// Kernel family plus bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub sigma: f64,
}

impl KernelSpec {
    pub fn gaussian(sigma: f64) -> Result<Self> {
        let spec = KernelSpec {
            family: KernelFamily::Gaussian,
            sigma,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::input(format!(
                "kernel bandwidth must be positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    /// `sup_x k(x, x)`; the constant entering the MMD concentration bound.
    pub fn sup_diagonal(&self) -> f64 {
        match self.family {
            KernelFamily::Gaussian => 1.0,
        }
    }

    /// Kernel value without dimension checks. Callers guarantee equal lengths.
    #[inline]
    pub(crate) fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        match self.family {
            KernelFamily::Gaussian => {
                let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                (-sq / (2.0 * self.sigma * self.sigma)).exp()
            }
        }
    }

    /// Gradient of `k(c, y)` with respect to `y`.
    pub(crate) fn grad_second(&self, c: &[f64], y: &[f64]) -> Vec<f64> {
        let k = self.eval_unchecked(c, y);
        let s2 = self.sigma * self.sigma;
        y.iter().zip(c).map(|(yi, ci)| -k * (yi - ci) / s2).collect()
    }

    /// Hessian of `k(c, y)` with respect to `y`.
    pub(crate) fn hessian_second(&self, c: &[f64], y: &[f64]) -> DMatrix<f64> {
        let n = y.len();
        let k = self.eval_unchecked(c, y);
        let s2 = self.sigma * self.sigma;
        DMatrix::from_fn(n, n, |i, j| {
            let di = y[i] - c[i];
            let dj = y[j] - c[j];
            let delta = if i == j { 1.0 } else { 0.0 };
            k * (di * dj / (s2 * s2) - delta / s2)
        })
    }
}

/// `k(x, y)` for the given kernel.
pub fn kernel_eval(x: &[f64], y: &[f64], spec: &KernelSpec) -> Result<f64> {
    check_dim(x.len(), y.len())?;
    Ok(spec.eval_unchecked(x, y))
}

fn common_dim(points: &[Vec<f64>]) -> Result<Option<usize>> {
    let Some(first) = points.first() else {
        return Ok(None);
    };
    for p in points {
        check_dim(first.len(), p.len())?;
    }
    Ok(Some(first.len()))
}

/// Dense Gram matrix `K[i][j] = k(p_i, p_j)`. An empty list gives a 0x0 matrix.
pub fn kernel_matrix(points: &[Vec<f64>], spec: &KernelSpec) -> Result<DMatrix<f64>> {
    common_dim(points)?;
    let n = points.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = spec.eval_unchecked(&points[i], &points[i]);
        for j in (i + 1)..n {
            let v = spec.eval_unchecked(&points[i], &points[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Unbiased estimate of the squared MMD between two equally sized samples.
///
/// Sums `k(X_i,X_j) + k(Y_i,Y_j) - k(X_i,Y_j) - k(X_j,Y_i)` over `i != j` and
/// divides by `N(N-1)`. The result may be negative.
pub fn mmd_unbiased(x: &[Vec<f64>], y: &[Vec<f64>], spec: &KernelSpec) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::input(format!(
            "mmd_unbiased needs matched sample sizes, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::input("mmd_unbiased needs at least two samples per set"));
    }
    let dx = common_dim(x)?.unwrap_or(0);
    let dy = common_dim(y)?.unwrap_or(0);
    check_dim(dx, dy)?;

    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            // (i, j) and (j, i) contribute identical terms. Grouping as
            // (same-set) - (cross) makes X == Y cancel exactly.
            let same = spec.eval_unchecked(&x[i], &x[j]) + spec.eval_unchecked(&y[i], &y[j]);
            let cross = spec.eval_unchecked(&x[i], &y[j]) + spec.eval_unchecked(&x[j], &y[i]);
            total += 2.0 * (same - cross);
        }
    }
    Ok(total / (n as f64 * (n as f64 - 1.0)))
}

/// `sqrt(max(0, mmd_unbiased))`, a nonnegative distance usable as a radius term.
pub fn mmd_distance(x: &[Vec<f64>], y: &[Vec<f64>], spec: &KernelSpec) -> Result<f64> {
    Ok(mmd_unbiased(x, y, spec)?.max(0.0).sqrt())
}

/// Finite expansion `f0 + sum_i alpha_i k(c_i, .)`.
///
/// The offset lives outside the RKHS: [`RkhsFunction::norm`] measures only
/// the kernel expansion part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RkhsFunction {
    pub offset: f64,
    pub centers: Vec<Vec<f64>>,
    pub coefficients: Vec<f64>,
    pub kernel: KernelSpec,
}

impl RkhsFunction {
    pub fn new(
        offset: f64,
        centers: Vec<Vec<f64>>,
        coefficients: Vec<f64>,
        kernel: KernelSpec,
    ) -> Result<Self> {
        if centers.len() != coefficients.len() {
            return Err(Error::input(format!(
                "{} centers but {} coefficients",
                centers.len(),
                coefficients.len()
            )));
        }
        common_dim(&centers)?;
        kernel.validate()?;
        Ok(RkhsFunction {
            offset,
            centers,
            coefficients,
            kernel,
        })
    }

    /// Constant function, no expansion terms.
    pub fn constant(offset: f64, kernel: KernelSpec) -> Self {
        RkhsFunction {
            offset,
            centers: Vec::new(),
            coefficients: Vec::new(),
            kernel,
        }
    }

    pub fn eval(&self, xi: &[f64]) -> Result<f64> {
        if let Some(c) = self.centers.first() {
            check_dim(c.len(), xi.len())?;
        }
        Ok(self.eval_unchecked(xi))
    }

    pub(crate) fn eval_unchecked(&self, xi: &[f64]) -> f64 {
        self.offset
            + self
                .centers
                .iter()
                .zip(&self.coefficients)
                .map(|(c, a)| a * self.kernel.eval_unchecked(c, xi))
                .sum::<f64>()
    }

    /// `alpha^T K alpha`, clamped at zero against roundoff.
    pub fn norm_squared(&self) -> f64 {
        if self.coefficients.iter().all(|a| *a == 0.0) {
            return 0.0;
        }
        // centers validated at construction or by the caller
        let k = kernel_matrix(&self.centers, &self.kernel).expect("centers share a dimension");
        let a = DVector::from_column_slice(&self.coefficients);
        a.dot(&(&k * &a)).max(0.0)
    }

    /// RKHS norm of the expansion part, `sqrt(alpha^T K alpha)`.
    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }
}

/// Free-function form of [`RkhsFunction::eval`].
pub fn rkhs_eval(h: &RkhsFunction, xi: &[f64]) -> Result<f64> {
    h.eval(xi)
}

/// Free-function form of [`RkhsFunction::norm`].
pub fn rkhs_norm(h: &RkhsFunction) -> f64 {
    h.norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn g(sigma: f64) -> KernelSpec {
        KernelSpec::gaussian(sigma).unwrap()
    }

    #[test]
    fn kernel_eval_examples() {
        assert_eq!(kernel_eval(&[0.0, 0.0], &[0.0, 0.0], &g(1.0)).unwrap(), 1.0);
        let v = kernel_eval(&[0.0, 0.0], &[std::f64::consts::SQRT_2, 0.0], &g(1.0)).unwrap();
        assert_abs_diff_eq!(v, (-1.0f64).exp(), epsilon = 1e-12);
        assert_eq!(kernel_eval(&[1.0, 2.0], &[1.0, 2.0], &g(0.5)).unwrap(), 1.0);
    }

    #[test]
    fn kernel_eval_rejects_mismatch() {
        assert!(matches!(
            kernel_eval(&[0.0], &[0.0, 1.0], &g(1.0)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn bandwidth_must_be_positive() {
        assert!(KernelSpec::gaussian(0.0).is_err());
        assert!(KernelSpec::gaussian(-1.0).is_err());
        assert!(KernelSpec::gaussian(f64::NAN).is_err());
    }

    #[test]
    fn kernel_matrix_examples() {
        let k = kernel_matrix(&[], &g(1.0)).unwrap();
        assert_eq!(k.shape(), (0, 0));

        let k = kernel_matrix(&[vec![3.0, 1.0]], &g(1.0)).unwrap();
        assert_eq!(k, DMatrix::from_element(1, 1, 1.0));

        let k = kernel_matrix(&[vec![2.0], vec![2.0]], &g(1.0)).unwrap();
        assert_eq!(k, DMatrix::from_element(2, 2, 1.0));

        let k = kernel_matrix(&[vec![0.0], vec![1.0]], &g(1.0)).unwrap();
        let off = (-0.5f64).exp();
        assert_abs_diff_eq!(k[(0, 1)], off, epsilon = 1e-15);
        assert_abs_diff_eq!(k[(1, 0)], off, epsilon = 1e-15);
        assert_eq!(k[(0, 0)], 1.0);
    }

    #[test]
    fn mmd_examples() {
        let x = vec![vec![0.3, 1.0], vec![-2.0, 0.5], vec![1.1, 1.1]];
        assert_eq!(mmd_unbiased(&x, &x, &g(0.7)).unwrap(), 0.0);

        let x = vec![vec![0.0], vec![0.0]];
        let y = vec![vec![1.0], vec![1.0]];
        let v = mmd_unbiased(&x, &y, &g(1.0)).unwrap();
        assert_abs_diff_eq!(v, 2.0 - 2.0 * (-0.5f64).exp(), epsilon = 1e-14);
        assert_abs_diff_eq!(v, 0.78694, epsilon = 1e-5);
    }

    #[test]
    fn mmd_rejects_bad_sizes() {
        let one = vec![vec![0.0]];
        assert!(mmd_unbiased(&one, &one, &g(1.0)).is_err());
        let two = vec![vec![0.0], vec![1.0]];
        let three = vec![vec![0.0], vec![1.0], vec![2.0]];
        assert!(mmd_unbiased(&two, &three, &g(1.0)).is_err());
        let two_d = vec![vec![0.0, 1.0], vec![1.0, 1.0]];
        assert!(mmd_unbiased(&two, &two_d, &g(1.0)).is_err());
    }

    #[test]
    fn rkhs_eval_examples() {
        let h = RkhsFunction::constant(3.0, g(1.0));
        assert_eq!(h.eval(&[5.0, -1.0]).unwrap(), 3.0);

        let h = RkhsFunction::new(0.0, vec![vec![0.4, 0.2]], vec![2.0], g(0.3)).unwrap();
        assert_abs_diff_eq!(h.eval(&[0.4, 0.2]).unwrap(), 2.0, epsilon = 1e-15);

        let h = RkhsFunction::new(0.5, vec![vec![0.0], vec![1.0]], vec![1.0, -1.0], g(1.0)).unwrap();
        let v = h.eval(&[0.0]).unwrap();
        assert_abs_diff_eq!(v, 1.5 - (-0.5f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.89347, epsilon = 1e-5);
        assert!(h.eval(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn rkhs_norm_examples() {
        let h = RkhsFunction::new(1.0, vec![vec![0.0], vec![1.0]], vec![0.0, 0.0], g(1.0)).unwrap();
        assert_eq!(h.norm(), 0.0);
        assert_eq!(RkhsFunction::constant(4.0, g(1.0)).norm(), 0.0);

        let h = RkhsFunction::new(7.0, vec![vec![1.0, 2.0]], vec![-3.5], g(0.2)).unwrap();
        assert_abs_diff_eq!(h.norm(), 3.5, epsilon = 1e-15);

        let h = RkhsFunction::new(0.0, vec![vec![0.0], vec![1.0]], vec![1.0, 1.0], g(1.0)).unwrap();
        assert_abs_diff_eq!(h.norm(), (2.0 + 2.0 * (-0.5f64).exp()).sqrt(), epsilon = 1e-14);
        assert_abs_diff_eq!(h.norm(), 1.79250, epsilon = 1e-5);
    }

    #[test]
    fn rkhs_function_rejects_length_mismatch() {
        assert!(RkhsFunction::new(0.0, vec![vec![0.0]], vec![1.0, 2.0], g(1.0)).is_err());
    }

    #[test]
    fn kernel_derivatives_match_finite_differences() {
        let spec = g(0.8);
        let c = [0.3, -0.4];
        let y = [0.1, 0.5];
        let grad = spec.grad_second(&c, &y);
        let fd = crate::nlp::finite_difference_gradient(|p| spec.eval_unchecked(&c, p), &y, 1e-6);
        for i in 0..2 {
            assert_abs_diff_eq!(grad[i], fd[i], epsilon = 1e-9);
        }
        let hess = spec.hessian_second(&c, &y);
        for i in 0..2 {
            let col = crate::nlp::finite_difference_gradient(|p| spec.grad_second(&c, p)[i], &y, 1e-6);
            for j in 0..2 {
                assert_abs_diff_eq!(hess[(i, j)], col[j], epsilon = 1e-8);
            }
        }
    }

    fn point_set(dim: usize, max: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-3.0..3.0f64, dim), 1..=max)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn kernel_matrix_is_psd(points in point_set(2, 50), sigma in 0.2..3.0f64) {
            let k = kernel_matrix(&points, &g(sigma)).unwrap();
            let eig = k.clone().symmetric_eigen();
            prop_assert!(eig.eigenvalues.iter().all(|l| *l >= -1e-9));
            prop_assert_eq!(k.clone(), k.transpose());
            prop_assert!(k.diagonal().iter().all(|d| *d == 1.0));
        }

        #[test]
        fn mmd_self_zero_and_symmetric(
            x in point_set(2, 12),
            shift in -1.0..1.0f64,
            sigma in 0.3..2.0f64,
        ) {
            prop_assume!(x.len() >= 2);
            let spec = g(sigma);
            prop_assert_eq!(mmd_unbiased(&x, &x, &spec).unwrap(), 0.0);
            let y: Vec<Vec<f64>> = x.iter().rev().map(|p| vec![p[0] + shift, p[1] * 0.5]).collect();
            let a = mmd_unbiased(&x, &y, &spec).unwrap();
            let b = mmd_unbiased(&y, &x, &spec).unwrap();
            prop_assert!((a - b).abs() <= 1e-14 * (1.0 + a.abs()));
        }

        #[test]
        fn norm_matches_double_loop_and_bounds_evaluation(
            centers in point_set(2, 10),
            seed_coeffs in prop::collection::vec(-2.0..2.0f64, 10),
            xi in prop::collection::vec(-4.0..4.0f64, 2),
            sigma in 0.3..2.0f64,
        ) {
            let spec = g(sigma);
            let coeffs: Vec<f64> = seed_coeffs[..centers.len()].to_vec();
            let h = RkhsFunction::new(0.0, centers.clone(), coeffs.clone(), spec).unwrap();
            let mut naive = 0.0;
            for i in 0..centers.len() {
                for j in 0..centers.len() {
                    naive += coeffs[i] * coeffs[j] * spec.eval_unchecked(&centers[i], &centers[j]);
                }
            }
            prop_assert!((h.norm_squared() - naive.max(0.0)).abs() <= 1e-10 * (1.0 + naive.abs()));
            // Cauchy-Schwarz with k(xi, xi) = 1
            prop_assert!(h.eval(&xi).unwrap().abs() <= h.norm() + 1e-9);
        }
    }
}
