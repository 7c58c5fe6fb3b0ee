//! Kernel SVM trained by SMO, used as a learned constraint with a known RKHS
//! norm.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::UncertainConstraint;
use crate::error::{check_dim, Error, Result};
use crate::kernel::{kernel_matrix, KernelSpec, RkhsFunction};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

fn model_schema_version() -> u32 {
    MODEL_SCHEMA_VERSION
}

/// On-disk form of a model.
#[derive(Serialize, Deserialize)]
struct ModelDocument {
    #[serde(default = "model_schema_version")]
    schema_version: u32,
    #[serde(flatten)]
    model: SvmModel,
}

/// `decision(xi) = sum_i beta_i k(sv_i, xi) + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub kernel: KernelSpec,
    pub support_vectors: Vec<Vec<f64>>,
    pub dual_coefficients: Vec<f64>,
    pub bias: f64,
}

impl SvmModel {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        check_dim(self.support_vectors.len(), self.dual_coefficients.len())?;
        if let Some(first) = self.support_vectors.first() {
            for sv in &self.support_vectors {
                check_dim(first.len(), sv.len())?;
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> Option<usize> {
        self.support_vectors.first().map(|v| v.len())
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let doc = ModelDocument {
            schema_version: MODEL_SCHEMA_VERSION,
            model: self.clone(),
        };
        fs::write(path, serde_json::to_string_pretty(&doc)? + "\n")?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(&fs::read_to_string(path)?)?;
        if doc.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::input(format!(
                "unsupported model schema_version {}, expected {MODEL_SCHEMA_VERSION}",
                doc.schema_version
            )));
        }
        doc.model.validate()?;
        Ok(doc.model)
    }

    pub fn as_rkhs(&self) -> RkhsFunction {
        RkhsFunction {
            offset: self.bias,
            centers: self.support_vectors.clone(),
            coefficients: self.dual_coefficients.clone(),
            kernel: self.kernel,
        }
    }

    fn decision_unchecked(&self, xi: &[f64]) -> f64 {
        self.bias
            + self
                .support_vectors
                .iter()
                .zip(&self.dual_coefficients)
                .map(|(sv, b)| b * self.kernel.eval_unchecked(sv, xi))
                .sum::<f64>()
    }

    fn decision_gradient(&self, xi: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; xi.len()];
        for (sv, b) in self.support_vectors.iter().zip(&self.dual_coefficients) {
            for (gi, d) in g.iter_mut().zip(self.kernel.grad_second(sv, xi)) {
                *gi += b * d;
            }
        }
        g
    }
}

pub fn svm_decision(model: &SvmModel, xi: &[f64]) -> Result<f64> {
    if let Some(d) = model.dim() {
        check_dim(d, xi.len())?;
    }
    Ok(model.decision_unchecked(xi))
}

/// `sqrt(beta' K beta)` over the support vectors; the bias is excluded.
pub fn svm_rkhs_norm(model: &SvmModel) -> f64 {
    model.as_rkhs().norm()
}

#[derive(Debug, Clone)]
pub struct SvmTraining {
    pub model: SvmModel,
    /// Dual variables for every training point.
    pub lambdas: Vec<f64>,
    /// Maximal violating-pair gap at termination.
    pub kkt_residual: f64,
    pub iterations: usize,
    pub dual_objective: f64,
}

/// `sum lambda - 1/2 sum_ij lambda_i lambda_j y_i y_j K_ij`.
pub fn dual_objective(kernel: &DMatrix<f64>, labels: &[f64], lambdas: &[f64]) -> f64 {
    let n = labels.len();
    let mut quad = 0.0;
    for i in 0..n {
        if lambdas[i] == 0.0 {
            continue;
        }
        for j in 0..n {
            quad += lambdas[i] * lambdas[j] * labels[i] * labels[j] * kernel[(i, j)];
        }
    }
    lambdas.iter().sum::<f64>() - 0.5 * quad
}

const KKT_TOLERANCE: f64 = 1e-6;
const SUPPORT_THRESHOLD: f64 = 1e-8;

pub fn train_svm(data: &[Vec<f64>], labels: &[f64], spec: KernelSpec, reg: f64) -> Result<SvmModel> {
    Ok(train_svm_detailed(data, labels, spec, reg)?.model)
}

/// Soft-margin dual solved by SMO with second-order working-set selection.
pub fn train_svm_detailed(data: &[Vec<f64>], labels: &[f64], spec: KernelSpec, reg: f64) -> Result<SvmTraining> {
    spec.validate()?;
    check_dim(data.len(), labels.len())?;
    if data.len() < 2 {
        return Err(Error::input("need at least two training points"));
    }
    if !(reg > 0.0) || !reg.is_finite() {
        return Err(Error::input(format!("regularization must be positive, got {reg}")));
    }
    if labels.iter().any(|y| *y != 1.0 && *y != -1.0) {
        return Err(Error::input("labels must be +1 or -1"));
    }
    if !labels.contains(&1.0) || !labels.contains(&-1.0) {
        return Err(Error::input("training data contains a single class"));
    }
    let n = data.len();
    let k = kernel_matrix(data, &spec)?;
    let y = labels;
    let mut alpha = vec![0.0; n];
    // gradient of 1/2 a'Qa - e'a
    let mut grad = vec![-1.0; n];
    let max_iter = 100_000.max(100 * n);
    let tau = 1e-12;

    let up = |a: f64, yi: f64| (yi > 0.0 && a < reg) || (yi < 0.0 && a > 0.0);
    let low = |a: f64, yi: f64| (yi > 0.0 && a > 0.0) || (yi < 0.0 && a < reg);

    let mut gap = f64::INFINITY;
    let mut iter = 0;
    while iter < max_iter {
        let mut i = usize::MAX;
        let mut gmax = f64::NEG_INFINITY;
        let mut gmin = f64::INFINITY;
        for t in 0..n {
            let v = -y[t] * grad[t];
            if up(alpha[t], y[t]) && v > gmax {
                gmax = v;
                i = t;
            }
            if low(alpha[t], y[t]) {
                gmin = gmin.min(v);
            }
        }
        gap = gmax - gmin;
        if i == usize::MAX || gap < KKT_TOLERANCE {
            break;
        }
        let mut j = usize::MAX;
        let mut best = f64::INFINITY;
        for t in 0..n {
            if !low(alpha[t], y[t]) {
                continue;
            }
            let b = gmax + y[t] * grad[t];
            if b > 0.0 {
                let a = (k[(i, i)] + k[(t, t)] - 2.0 * k[(i, t)]).max(tau);
                let obj = -(b * b) / a;
                if obj < best {
                    best = obj;
                    j = t;
                }
            }
        }
        if j == usize::MAX {
            break;
        }

        // two-variable update on the line y_i a_i + y_j a_j = const
        let quad = (k[(i, i)] + k[(j, j)] - 2.0 * k[(i, j)]).max(tau);
        let (ai, aj) = (alpha[i], alpha[j]);
        let delta = (-y[i] * grad[i] + y[j] * grad[j]) / quad;
        let sum = y[i] * ai + y[j] * aj;
        let mut new_i = ai + y[i] * delta;
        // feasible range for a_i given the equality constraint
        let (lo, hi) = if y[i] == y[j] {
            ((sum * y[i] - reg).max(0.0), (sum * y[i]).min(reg))
        } else {
            ((sum * y[i]).max(0.0), (reg + sum * y[i]).min(reg))
        };
        new_i = new_i.clamp(lo, hi);
        let new_j = y[j] * (sum - y[i] * new_i);
        let new_j = new_j.clamp(0.0, reg);
        let di = new_i - ai;
        let dj = new_j - aj;
        alpha[i] = new_i;
        alpha[j] = new_j;
        for t in 0..n {
            grad[t] += y[t] * (y[i] * k[(t, i)] * di + y[j] * k[(t, j)] * dj);
        }
        iter += 1;
    }
    if gap >= KKT_TOLERANCE {
        return Err(Error::Convergence {
            what: "svm training",
            iterations: iter,
            residual: gap,
        });
    }

    // bias from free support vectors, else the midpoint of the feasible range
    let mut free_sum = 0.0;
    let mut free_n = 0usize;
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in 0..n {
        let v = -y[t] * grad[t];
        if alpha[t] > 0.0 && alpha[t] < reg {
            free_sum += v;
            free_n += 1;
        } else if (y[t] > 0.0) == (alpha[t] >= reg) {
            lb = lb.max(v);
        } else {
            ub = ub.min(v);
        }
    }
    let bias = if free_n > 0 { free_sum / free_n as f64 } else { 0.5 * (ub + lb) };

    let mut support_vectors = Vec::new();
    let mut dual_coefficients = Vec::new();
    for t in 0..n {
        if alpha[t] > SUPPORT_THRESHOLD {
            support_vectors.push(data[t].clone());
            dual_coefficients.push(y[t] * alpha[t]);
        }
    }
    let dual = dual_objective(&k, y, &alpha);
    Ok(SvmTraining {
        model: SvmModel {
            kernel: spec,
            support_vectors,
            dual_coefficients,
            bias,
        },
        lambdas: alpha,
        kkt_residual: gap,
        iterations: iter,
        dual_objective: dual,
    })
}

/// Points in the box `[-10, 10] x [-8, 2]` labelled by the exponential
/// constraint: `+1` where `-5 + e^{0.1 x1} - x2 <= 0`. Points within `gap`
/// of the boundary (in constraint value) are rejected so the classes are
/// separable.
pub fn synthetic_exp_dataset(count: usize, gap: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    while points.len() < count {
        let p: Vec<f64> = vec![rng.random_range(-10.0..10.0), rng.random_range(-8.0..2.0)];
        let c = -5.0 + (0.1 * p[0]).exp() - p[1];
        if c.abs() < gap {
            continue;
        }
        labels.push(if c <= 0.0 { 1.0 } else { -1.0 });
        points.push(p);
    }
    (points, labels)
}

/// Learned constraint `C(x, xi) = -decision(x + xi)`: nonpositive where the
/// classifier predicts the feasible class.
#[derive(Debug, Clone)]
pub struct SvmConstraint {
    pub model: SvmModel,
    norm: f64,
}

impl SvmConstraint {
    pub fn new(model: SvmModel) -> Result<Self> {
        model.validate()?;
        if model.dim().is_none() {
            return Err(Error::input("svm model has no support vectors"));
        }
        let norm = svm_rkhs_norm(&model);
        Ok(SvmConstraint { model, norm })
    }
}

impl UncertainConstraint for SvmConstraint {
    fn label(&self) -> &str {
        "svm"
    }
    fn dim(&self) -> usize {
        self.model.dim().unwrap_or(0)
    }
    fn value(&self, x: &[f64], xi: &[f64]) -> f64 {
        let y: Vec<f64> = x.iter().zip(xi).map(|(a, b)| a + b).collect();
        -self.model.decision_unchecked(&y)
    }
    fn grad_x(&self, x: &[f64], xi: &[f64]) -> Vec<f64> {
        self.grad_xi(x, xi)
    }
    fn grad_xi(&self, x: &[f64], xi: &[f64]) -> Vec<f64> {
        let y: Vec<f64> = x.iter().zip(xi).map(|(a, b)| a + b).collect();
        self.model.decision_gradient(&y).into_iter().map(|g| -g).collect()
    }
    fn mixed_jacobian(&self, x: &[f64], xi: &[f64]) -> DMatrix<f64> {
        let y: Vec<f64> = x.iter().zip(xi).map(|(a, b)| a + b).collect();
        let mut h = DMatrix::zeros(y.len(), y.len());
        for (sv, b) in self.model.support_vectors.iter().zip(&self.model.dual_coefficients) {
            h -= self.model.kernel.hessian_second(sv, &y) * *b;
        }
        h
    }
    fn native_rkhs_norm(&self) -> Option<f64> {
        Some(self.norm)
    }
}
