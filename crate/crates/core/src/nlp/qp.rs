//! Dense strictly convex QP by the Goldfarb–Idnani dual active-set method.
//!
//! Solves `min 1/2 x'Hx + g'x  s.t.  n_i'x >= b_i`, with the constraint
//! normals stored as the columns of an `n x m` matrix. The method starts
//! from the unconstrained minimizer and adds violated constraints one at a
//! time, so no feasible starting point is needed and infeasibility is
//! detected directly.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// One multiplier per constraint, zero for inactive ones.
    pub multipliers: DVector<f64>,
    pub active: Vec<usize>,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QpError {
    NotPositiveDefinite,
    Infeasible,
    IterationLimit,
}

/// Givens rotation (c, s) with `[c s; -s c] [a; b] = [r; 0]`.
#[inline]
fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    if b == 0.0 {
        return (1.0, 0.0, a);
    }
    let r = a.hypot(b);
    (a / r, b / r, r)
}

/// Rotate columns `i` and `j` of `m`: `[ci cj] <- [ci cj] [c -s; s c]`.
#[inline]
fn rotate_columns(m: &mut DMatrix<f64>, i: usize, j: usize, c: f64, s: f64) {
    let nrows = m.nrows();
    let (mut ci, mut cj) = m.columns_range_pair_mut(i, j);
    for r in 0..nrows {
        let a = ci[r];
        let b = cj[r];
        ci[r] = c * a + s * b;
        cj[r] = -s * a + c * b;
    }
}

struct Workspace {
    n: usize,
    /// `J = L^{-T} Q`; its first `q` columns span the active normals.
    j: DMatrix<f64>,
    /// Upper-triangular factor in the leading `q x q` block.
    r: DMatrix<f64>,
    q: usize,
}

impl Workspace {
    fn d_for(&self, normal: &DVector<f64>) -> DVector<f64> {
        self.j.tr_mul(normal)
    }

    /// Primal step direction from the trailing components of `d`.
    fn primal_direction(&self, d: &DVector<f64>) -> DVector<f64> {
        let mut z = DVector::zeros(self.n);
        for k in self.q..self.n {
            if d[k] != 0.0 {
                z.axpy(d[k], &self.j.column(k), 1.0);
            }
        }
        z
    }

    /// Dual step direction `R^{-1} d[..q]`.
    fn dual_direction(&self, d: &DVector<f64>) -> DVector<f64> {
        let q = self.q;
        let mut r = DVector::zeros(q);
        for i in (0..q).rev() {
            let mut acc = d[i];
            for k in (i + 1)..q {
                acc -= self.r[(i, k)] * r[k];
            }
            r[i] = acc / self.r[(i, i)];
        }
        r
    }

    /// Append a constraint whose transformed normal is `d`. Returns false when
    /// the normal is numerically dependent on the active set.
    fn add(&mut self, mut d: DVector<f64>) -> bool {
        let n = self.n;
        let q = self.q;
        for k in ((q + 1)..n).rev() {
            if d[k] == 0.0 {
                continue;
            }
            let (c, s, rr) = givens(d[k - 1], d[k]);
            d[k - 1] = rr;
            d[k] = 0.0;
            rotate_columns(&mut self.j, k - 1, k, c, s);
        }
        if d[q].abs() <= 1e-14 * d.norm().max(1.0) {
            return false;
        }
        for i in 0..=q {
            self.r[(i, q)] = d[i];
        }
        self.q += 1;
        true
    }

    /// Remove the active constraint at position `l`.
    fn drop(&mut self, l: usize) {
        let q = self.q;
        for col in l..(q - 1) {
            for i in 0..q {
                self.r[(i, col)] = self.r[(i, col + 1)];
            }
        }
        for i in 0..q {
            self.r[(i, q - 1)] = 0.0;
        }
        // R is now upper Hessenberg from column l on
        for col in l..(q - 1) {
            let a = self.r[(col, col)];
            let b = self.r[(col + 1, col)];
            if b == 0.0 {
                continue;
            }
            let (c, s, rr) = givens(a, b);
            self.r[(col, col)] = rr;
            self.r[(col + 1, col)] = 0.0;
            for k in (col + 1)..(q - 1) {
                let x = self.r[(col, k)];
                let y = self.r[(col + 1, k)];
                self.r[(col, k)] = c * x + s * y;
                self.r[(col + 1, k)] = -s * x + c * y;
            }
            rotate_columns(&mut self.j, col, col + 1, c, s);
        }
        self.q -= 1;
    }
}

/// Solve the QP. `normals` is `n x m`, one constraint normal per column.
pub fn solve(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    normals: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<QpSolution, QpError> {
    let n = h.nrows();
    let m = normals.ncols();
    debug_assert_eq!(normals.nrows(), n);
    debug_assert_eq!(b.len(), m);

    let chol = h.clone().cholesky().ok_or(QpError::NotPositiveDefinite)?;
    let l = chol.l();
    // J = L^{-T}
    let lt = l.transpose();
    let j = lt
        .solve_upper_triangular(&DMatrix::identity(n, n))
        .ok_or(QpError::NotPositiveDefinite)?;

    let mut x = -chol.solve(g);
    let mut ws = Workspace {
        n,
        j,
        r: DMatrix::zeros(n, n),
        q: 0,
    };
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut is_active = vec![false; m];

    let norms: Vec<f64> = (0..m).map(|i| normals.column(i).norm()).collect();
    let max_iter = 10 * (n + m) + 100;
    let mut iterations = 0;

    loop {
        // most violated constraint, normalized by the normal's length
        let slack = normals.tr_mul(&x) - b;
        let scale = 1.0 + x.amax();
        let mut pick: Option<(usize, f64)> = None;
        for i in 0..m {
            if is_active[i] || norms[i] == 0.0 {
                if norms[i] == 0.0 && slack[i] < -1e-12 * (1.0 + b[i].abs()) {
                    return Err(QpError::Infeasible);
                }
                continue;
            }
            let viol = -slack[i] / norms[i];
            if viol > 1e-12 * scale && pick.map_or(true, |(_, v)| viol > v) {
                pick = Some((i, viol));
            }
        }
        let Some((p, _)) = pick else {
            let mut multipliers = DVector::zeros(m);
            for (k, &i) in active.iter().enumerate() {
                multipliers[i] = u[k];
            }
            return Ok(QpSolution {
                x,
                multipliers,
                active,
                iterations,
            });
        };
        let np = normals.column(p).into_owned();
        let mut up = 0.0;

        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(QpError::IterationLimit);
            }
            let d = ws.d_for(&np);
            let z = ws.primal_direction(&d);
            let r = ws.dual_direction(&d);

            // partial (dual) step: first active multiplier to hit zero
            let mut t1 = f64::INFINITY;
            let mut drop_at = None;
            for k in 0..ws.q {
                if r[k] > 0.0 {
                    let ratio = u[k] / r[k];
                    if ratio < t1 {
                        t1 = ratio;
                        drop_at = Some(k);
                    }
                }
            }
            // full (primal) step
            let znp = z.dot(&np);
            let sp = np.dot(&x) - b[p];
            let t2 = if z.amax() > 1e-14 * (1.0 + x.amax()) && znp > 0.0 {
                -sp / znp
            } else {
                f64::INFINITY
            };
            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(QpError::Infeasible);
            }
            for k in 0..ws.q {
                u[k] -= t * r[k];
            }
            up += t;
            if t2.is_finite() {
                x.axpy(t, &z, 1.0);
            }
            if t2 <= t1 {
                if ws.add(d) {
                    active.push(p);
                    u.push(up);
                    is_active[p] = true;
                }
                break;
            }
            let l = drop_at.expect("finite partial step has a blocking index");
            ws.drop(l);
            is_active[active[l]] = false;
            active.remove(l);
            u.remove(l);
        }
    }
}
