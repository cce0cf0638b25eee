//! Linear fusion of gene outputs.
//!
//! Minimizes
//!
//! ```text
//! (1/n) Σ (y_i − ŷ_i)² + λ1 ‖β‖₁ + λ2 ‖β‖₂²,   ŷ_i = Σ_j β_j x_ij + β0
//! ```
//!
//! by cyclic coordinate descent on internally standardized columns (zero
//! mean, unit population variance). The penalties act on the standardized
//! coefficients; the reported coefficients are back-transformed to the
//! original column scale. The intercept is never penalized. Ridge
//! (`λ1 = 0`) and ordinary least squares (`λ1 = λ2 = 0`) are special cases.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LAMBDA1: f64 = 1e-3;
pub const DEFAULT_LAMBDA2: f64 = 1e-3;
pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITERS: usize = 10_000;

/// Columns whose population SD falls below this (relative to their scale)
/// are treated as constant and excluded from the fit.
const ZERO_VARIANCE_REL: f64 = 1e-12;

/// Column-major matrix of gene outputs with cached standardization stats.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    columns: Vec<Vec<f64>>,
    n_rows: usize,
    means: Vec<f64>,
    sds: Vec<f64>,
}

impl DesignMatrix {
    pub fn new(n_rows: usize, columns: Vec<Vec<f64>>) -> Result<Self> {
        for (j, col) in columns.iter().enumerate() {
            if col.len() != n_rows {
                return Err(Error::Input(format!(
                    "column {j} has {} rows, expected {n_rows}",
                    col.len()
                )));
            }
            if let Some(i) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::Input(format!("non-finite entry at row {i}, column {j}")));
            }
        }
        let (means, sds) = columns.iter().map(|c| mean_sd_population(c)).unzip();
        Ok(DesignMatrix {
            columns,
            n_rows,
            means,
            sds,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.columns[j]
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn column_means(&self) -> &[f64] {
        &self.means
    }

    pub fn column_sds(&self) -> &[f64] {
        &self.sds
    }

    /// Whether column `j` carries no usable variance.
    pub fn is_constant(&self, j: usize) -> bool {
        self.sds[j] <= ZERO_VARIANCE_REL * self.means[j].abs().max(1.0)
    }

    /// Row subset in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> DesignMatrix {
        let columns = self
            .columns
            .iter()
            .map(|c| rows.iter().map(|&i| c[i]).collect())
            .collect();
        DesignMatrix::new(rows.len(), columns).expect("subset of a valid matrix is valid")
    }
}

fn mean_sd_population(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Fitted fusion weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    /// One coefficient per design column, original scale.
    pub beta: Vec<f64>,
    pub intercept: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub train_rmse: f64,
    /// Coordinate-descent sweeps performed.
    pub sweeps: usize,
    pub converged: bool,
}

impl LinearFit {
    /// Intercept-only model.
    pub fn constant(n_cols: usize, intercept: f64) -> Self {
        LinearFit {
            beta: vec![0.0; n_cols],
            intercept,
            lambda1: 0.0,
            lambda2: 0.0,
            train_rmse: 0.0,
            sweeps: 0,
            converged: true,
        }
    }

    /// `Σ β_j row_j + β0` for one row of column values.
    pub fn predict_one(&self, values: &[f64]) -> f64 {
        self.beta
            .iter()
            .zip(values)
            .filter(|(b, _)| **b != 0.0)
            .fold(self.intercept, |acc, (b, x)| acc + b * x)
    }
}

/// Elastic-net solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElasticNet {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for ElasticNet {
    fn default() -> Self {
        ElasticNet {
            lambda1: DEFAULT_LAMBDA1,
            lambda2: DEFAULT_LAMBDA2,
            tol: DEFAULT_TOL,
            max_iters: DEFAULT_MAX_ITERS,
        }
    }
}

impl ElasticNet {
    pub fn new(lambda1: f64, lambda2: f64) -> Self {
        ElasticNet {
            lambda1,
            lambda2,
            ..Default::default()
        }
    }

    /// Unpenalized least squares.
    pub fn ols() -> Self {
        ElasticNet::new(0.0, 0.0)
    }

    pub fn fit(&self, x: &DesignMatrix, y: &[f64]) -> Result<LinearFit> {
        self.solve(x, y, None)
    }

    /// Fit and also return the standardized-scale objective after every sweep.
    pub fn fit_with_trace(&self, x: &DesignMatrix, y: &[f64]) -> Result<(LinearFit, Vec<f64>)> {
        let mut trace = Vec::new();
        let fit = self.solve(x, y, Some(&mut trace))?;
        Ok((fit, trace))
    }

    fn solve(&self, x: &DesignMatrix, y: &[f64], mut trace: Option<&mut Vec<f64>>) -> Result<LinearFit> {
        let n = x.n_rows();
        if n < 2 {
            return Err(Error::Input(format!("need at least 2 rows, got {n}")));
        }
        if y.len() != n {
            return Err(Error::Input(format!("target has {} rows, design has {n}", y.len())));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite target value".into()));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Input(format!(
                "penalties must be non-negative (lambda1={}, lambda2={})",
                self.lambda1, self.lambda2
            )));
        }

        let nf = n as f64;
        let y_mean = y.iter().sum::<f64>() / nf;
        let active: Vec<usize> = (0..x.n_cols()).filter(|&j| !x.is_constant(j)).collect();
        let standardized: Vec<Vec<f64>> = active
            .iter()
            .map(|&j| {
                let (m, s) = (x.means[j], x.sds[j]);
                x.columns[j].iter().map(|v| (v - m) / s).collect()
            })
            .collect();

        // Covariance updates: with unit-variance columns, gram[k][k] = 1 and
        // the partial-residual correlation of column k is
        // xty[k] - (gram·coef)[k] + coef[k].
        let p = active.len();
        let centred: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
        let xty: Vec<f64> = standardized
            .iter()
            .map(|c| c.iter().zip(&centred).map(|(a, r)| a * r).sum::<f64>() / nf)
            .collect();
        let mut gram = vec![vec![0.0; p]; p];
        for a in 0..p {
            for b in a..p {
                let g = standardized[a].iter().zip(&standardized[b]).map(|(u, v)| u * v).sum::<f64>() / nf;
                gram[a][b] = g;
                gram[b][a] = g;
            }
        }
        let yty = centred.iter().map(|r| r * r).sum::<f64>() / nf;

        let mut coef = vec![0.0; p];
        let mut gcoef = vec![0.0; p];
        let threshold = self.lambda1 / 2.0;
        let shrink = 1.0 + self.lambda2;
        let mut sweeps = 0;
        let mut converged = active.is_empty();

        while !converged && sweeps < self.max_iters {
            sweeps += 1;
            let mut max_change: f64 = 0.0;
            for k in 0..p {
                let rho = xty[k] - gcoef[k] + gram[k][k] * coef[k];
                let updated = soft_threshold(rho, threshold) / shrink;
                let delta = updated - coef[k];
                if delta != 0.0 {
                    for (g, col) in gcoef.iter_mut().zip(&gram[k]) {
                        *g += col * delta;
                    }
                    coef[k] = updated;
                }
                max_change = max_change.max(delta.abs());
            }
            if let Some(t) = trace.as_deref_mut() {
                let mse = yty - 2.0 * dot(&xty, &coef) + dot(&coef, &gcoef);
                t.push(self.penalized(mse, &coef));
            }
            converged = max_change < self.tol;
        }

        let mut beta = vec![0.0; x.n_cols()];
        let mut intercept = y_mean;
        for (k, &j) in active.iter().enumerate() {
            beta[j] = coef[k] / x.sds[j];
            intercept -= beta[j] * x.means[j];
        }
        let mut fit = LinearFit {
            beta,
            intercept,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            train_rmse: 0.0,
            sweeps,
            converged,
        };
        fit.train_rmse = rmse(&predict(&fit, x)?, y)?;
        Ok(fit)
    }

    fn penalized(&self, mse: f64, coef: &[f64]) -> f64 {
        mse + self.lambda1 * coef.iter().map(|b| b.abs()).sum::<f64>()
            + self.lambda2 * coef.iter().map(|b| b * b).sum::<f64>()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

#[inline]
pub fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

/// Fit with explicit solver settings.
pub fn fit_elastic_net(
    x: &DesignMatrix,
    y: &[f64],
    lambda1: f64,
    lambda2: f64,
    tol: f64,
    max_iters: usize,
) -> Result<LinearFit> {
    ElasticNet {
        lambda1,
        lambda2,
        tol,
        max_iters,
    }
    .fit(x, y)
}

pub fn predict(fit: &LinearFit, x: &DesignMatrix) -> Result<Vec<f64>> {
    if fit.beta.len() != x.n_cols() {
        return Err(Error::Input(format!(
            "fit has {} coefficients, design has {} columns",
            fit.beta.len(),
            x.n_cols()
        )));
    }
    let mut out = vec![fit.intercept; x.n_rows()];
    for (b, col) in fit.beta.iter().zip(x.columns()) {
        if *b == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(col) {
            *o += b * v;
        }
    }
    Ok(out)
}

pub fn rmse(yhat: &[f64], y: &[f64]) -> Result<f64> {
    if yhat.len() != y.len() || y.is_empty() {
        return Err(Error::Input(format!(
            "rmse needs equal non-empty lengths, got {} and {}",
            yhat.len(),
            y.len()
        )));
    }
    let sse: f64 = yhat.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sse / y.len() as f64).sqrt())
}

/// Assignment of rows to cross-validation folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Folds {
    k: usize,
    /// Row indices held out by each fold.
    held_out: Vec<Vec<usize>>,
}

impl Folds {
    /// Seeded shuffle of `0..n`, dealt round-robin into `k` folds.
    pub fn new<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Self> {
        if k < 2 {
            return Err(Error::Input(format!("k-fold needs k >= 2, got {k}")));
        }
        if n < k {
            return Err(Error::Input(format!("k-fold needs at least k={k} rows, got {n}")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut held_out = vec![Vec::with_capacity(n / k + 1); k];
        for (pos, row) in order.into_iter().enumerate() {
            held_out[pos % k].push(row);
        }
        for fold in &mut held_out {
            fold.sort_unstable();
        }
        Ok(Folds { k, held_out })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn held_out(&self, fold: usize) -> &[usize] {
        &self.held_out[fold]
    }

    pub fn n_rows(&self) -> usize {
        self.held_out.iter().map(Vec::len).sum()
    }

    /// Rows used for training when `fold` is held out, ascending.
    pub fn training_rows(&self, fold: usize) -> Vec<usize> {
        let mut rows: Vec<usize> = self
            .held_out
            .iter()
            .enumerate()
            .filter(|(f, _)| *f != fold)
            .flat_map(|(_, r)| r.iter().copied())
            .collect();
        rows.sort_unstable();
        rows
    }
}

/// Mean held-out RMSE over the given folds.
pub fn cv_rmse(x: &DesignMatrix, y: &[f64], folds: &Folds, net: &ElasticNet) -> Result<f64> {
    if folds.n_rows() != x.n_rows() || y.len() != x.n_rows() {
        return Err(Error::Input(format!(
            "folds cover {} rows, design has {}, target has {}",
            folds.n_rows(),
            x.n_rows(),
            y.len()
        )));
    }
    let mut total = 0.0;
    for f in 0..folds.k() {
        let train_rows = folds.training_rows(f);
        let test_rows = folds.held_out(f);
        let x_train = x.select_rows(&train_rows);
        let y_train: Vec<f64> = train_rows.iter().map(|&i| y[i]).collect();
        let fit = net.fit(&x_train, &y_train)?;
        let x_test = x.select_rows(test_rows);
        let y_test: Vec<f64> = test_rows.iter().map(|&i| y[i]).collect();
        total += rmse(&predict(&fit, &x_test)?, &y_test)?;
    }
    Ok(total / folds.k() as f64)
}

/// k-fold cross-validated RMSE with a fresh seeded fold assignment.
pub fn kfold_cv_rmse<R: Rng + ?Sized>(
    x: &DesignMatrix,
    y: &[f64],
    k: usize,
    lambda1: f64,
    lambda2: f64,
    rng: &mut R,
) -> Result<f64> {
    let folds = Folds::new(x.n_rows(), k, rng)?;
    cv_rmse(x, y, &folds, &ElasticNet::new(lambda1, lambda2))
}
