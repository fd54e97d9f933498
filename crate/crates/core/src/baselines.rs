//! Linear comparators: Lasso by coordinate descent and principal component
//! regression.

use serde::{Deserialize, Serialize};

use crate::autodiff::eig::{self, Tridiagonal};
use crate::autodiff::Matrix;
use crate::datagen::Split;
use crate::error::{contract, Error, Result};
use crate::training::mse;

/// Per-column centering and scaling, with zero-variance columns flagged.
struct Standardized {
    /// Column-major standardized data: `cols[j]` has length `n`.
    cols: Vec<Vec<f64>>,
    means: Vec<f64>,
    scales: Vec<f64>,
}

fn standardize(x: &Matrix) -> Standardized {
    let (n, p) = x.shape();
    let means = x.column_means().into_data();
    let mut cols = vec![vec![0.0; n]; p];
    let mut scales = vec![0.0; p];
    for j in 0..p {
        let mut ss = 0.0;
        for i in 0..n {
            let d = x.get(i, j) - means[j];
            cols[j][i] = d;
            ss += d * d;
        }
        let sd = (ss / n as f64).sqrt();
        scales[j] = sd;
        if sd > 0.0 {
            cols[j].iter_mut().for_each(|v| *v /= sd);
        } else {
            cols[j].fill(0.0);
        }
    }
    Standardized { cols, means, scales }
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LassoModel {
    /// Coefficients on the original feature scale.
    pub w: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    /// Coordinate-descent sweeps performed.
    pub sweeps: usize,
}

impl LassoModel {
    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>> {
        contract!(
            x.cols() == self.w.len(),
            "lasso expects {} features, got {}",
            self.w.len(),
            x.cols()
        );
        Ok((0..x.rows())
            .map(|i| self.intercept + x.row_slice(i).iter().zip(&self.w).map(|(a, b)| a * b).sum::<f64>())
            .collect())
    }
}

/// Coordinate-descent state on standardized data, reusable across a path.
struct LassoSolver {
    data: Standardized,
    y_mean: f64,
    n: f64,
    beta: Vec<f64>,
    resid: Vec<f64>,
}

impl LassoSolver {
    fn new(x: &Matrix, y: &[f64]) -> Result<Self> {
        contract!(x.rows() == y.len(), "X has {} rows but y has {}", x.rows(), y.len());
        contract!(!y.is_empty(), "lasso needs at least one row");
        let data = standardize(x);
        let y_mean = y.iter().sum::<f64>() / y.len() as f64;
        Ok(Self {
            beta: vec![0.0; x.cols()],
            resid: y.iter().map(|v| v - y_mean).collect(),
            y_mean,
            n: y.len() as f64,
            data,
        })
    }

    /// `max_j |x_jᵀ y_c| / n` on the standardized design.
    fn lambda_max(&self) -> f64 {
        // Residual equals centered y only while beta is zero.
        let yc: Vec<f64> = {
            let mut r = self.resid.clone();
            for (col, b) in self.data.cols.iter().zip(&self.beta) {
                r.iter_mut().zip(col).for_each(|(ri, xi)| *ri += xi * b);
            }
            r
        };
        self.data
            .cols
            .iter()
            .map(|c| c.iter().zip(&yc).map(|(a, b)| a * b).sum::<f64>().abs() / self.n)
            .fold(0.0, f64::max)
    }

    fn objective(&self, lambda: f64) -> f64 {
        0.5 * self.resid.iter().map(|r| r * r).sum::<f64>() / self.n
            + lambda * self.beta.iter().map(|b| b.abs()).sum::<f64>()
    }

    fn sweep(&mut self, lambda: f64) -> f64 {
        let mut max_change: f64 = 0.0;
        for j in 0..self.beta.len() {
            if self.data.scales[j] == 0.0 {
                continue;
            }
            let col = &self.data.cols[j];
            let old = self.beta[j];
            let rho = col.iter().zip(&self.resid).map(|(a, b)| a * b).sum::<f64>() / self.n + old;
            let new = soft_threshold(rho, lambda);
            if new != old {
                let d = new - old;
                self.resid.iter_mut().zip(col).for_each(|(r, x)| *r -= x * d);
                self.beta[j] = new;
                max_change = max_change.max(d.abs());
            }
        }
        max_change
    }

    fn solve(&mut self, lambda: f64, max_iter: usize, tol: f64) -> usize {
        for sweep in 1..=max_iter {
            if self.sweep(lambda) < tol {
                return sweep;
            }
        }
        max_iter
    }

    fn model(&self, lambda: f64, sweeps: usize) -> LassoModel {
        let w: Vec<f64> = self
            .beta
            .iter()
            .zip(&self.data.scales)
            .map(|(b, s)| if *s > 0.0 { b / s } else { 0.0 })
            .collect();
        let intercept = self.y_mean - w.iter().zip(&self.data.means).map(|(a, b)| a * b).sum::<f64>();
        LassoModel {
            w,
            intercept,
            lambda,
            sweeps,
        }
    }
}

/// Minimizes `½n⁻¹‖y − Xw‖² + λ‖w‖₁` over standardized columns, stopping
/// once no coefficient moves by more than `tol` in a sweep. Zero-variance
/// columns keep a zero weight.
pub fn lasso_fit(x: &Matrix, y: &[f64], lambda: f64, max_iter: usize, tol: f64) -> Result<LassoModel> {
    contract!(
        lambda >= 0.0 && lambda.is_finite(),
        "lambda must be finite and non-negative"
    );
    let mut solver = LassoSolver::new(x, y)?;
    let sweeps = solver.solve(lambda, max_iter, tol);
    Ok(solver.model(lambda, sweeps))
}

/// Objective value after each sweep, for monitoring convergence.
pub fn lasso_trace(x: &Matrix, y: &[f64], lambda: f64, sweeps: usize) -> Result<Vec<f64>> {
    let mut solver = LassoSolver::new(x, y)?;
    let mut out = vec![solver.objective(lambda)];
    for _ in 0..sweeps {
        solver.sweep(lambda);
        out.push(solver.objective(lambda));
    }
    Ok(out)
}

/// Number of penalty values in the validation grid.
pub const LASSO_GRID: usize = 20;

/// The penalty grid: `LASSO_GRID` log-spaced multiples in `[1e-4, 1e1]` of
/// `max|Xᵀy|/n` on the standardized design, largest first.
pub fn lasso_grid(x: &Matrix, y: &[f64]) -> Result<Vec<f64>> {
    let lmax = LassoSolver::new(x, y)?.lambda_max();
    let (lo, hi) = (1e-4f64.ln(), 1e1f64.ln());
    Ok((0..LASSO_GRID)
        .rev()
        .map(|i| lmax * (lo + (hi - lo) * i as f64 / (LASSO_GRID - 1) as f64).exp())
        .collect())
}

/// A fitted baseline with its selection score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selected<M> {
    pub model: M,
    pub valid_mse: f64,
}

/// Fits the whole penalty path with warm starts and keeps the model with
/// the lowest validation MSE.
pub fn lasso_select(train: &Split, valid: &Split, max_iter: usize, tol: f64) -> Result<Selected<LassoModel>> {
    let grid = lasso_grid(&train.x, &train.y)?;
    let mut solver = LassoSolver::new(&train.x, &train.y)?;
    let mut best: Option<Selected<LassoModel>> = None;
    for lambda in grid {
        let sweeps = solver.solve(lambda, max_iter, tol);
        let model = solver.model(lambda, sweeps);
        let valid_mse = mse(&model.predict(&valid.x)?, &valid.y);
        if best.as_ref().is_none_or(|b| valid_mse < b.valid_mse) {
            best = Some(Selected { model, valid_mse });
        }
    }
    best.ok_or_else(|| Error::Numeric("empty lasso grid".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcrModel {
    pub means: Vec<f64>,
    /// `p x k`, orthonormal columns.
    pub components: Matrix,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
}

impl PcrModel {
    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>> {
        contract!(
            x.cols() == self.means.len(),
            "PCR expects {} features, got {}",
            self.means.len(),
            x.cols()
        );
        let mut xc = x.clone();
        for i in 0..xc.rows() {
            xc.row_slice_mut(i)
                .iter_mut()
                .zip(&self.means)
                .for_each(|(v, m)| *v -= m);
        }
        let scores = xc.matmul(&self.components)?;
        Ok((0..x.rows())
            .map(|i| {
                self.intercept
                    + scores
                        .row_slice(i)
                        .iter()
                        .zip(&self.coefficients)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect())
    }
}

/// Leading principal directions of centered data and the regression of
/// `y` on their scores, shared by every `k` up to `k_max`.
pub struct PcrPath {
    means: Vec<f64>,
    components: Matrix,
    /// Per-component OLS coefficient; scores are orthogonal, so the fit for
    /// any `k` keeps the first `k` of these.
    coefficients: Vec<f64>,
    y_mean: f64,
}

/// Relative eigenvalue floor below which a direction counts as rank-deficient.
const RANK_TOLERANCE: f64 = 1e-10;

impl PcrPath {
    pub fn new(x: &Matrix, y: &[f64], k_max: usize) -> Result<Self> {
        let (n, p) = x.shape();
        contract!(n == y.len(), "X has {n} rows but y has {}", y.len());
        contract!(
            k_max >= 1 && k_max <= n.min(p),
            "k must be in 1..=min(n, p) = {}",
            n.min(p)
        );
        let means = x.column_means().into_data();
        let xc = x.centered();
        // Decompose whichever Gram matrix is smaller.
        let (values, components) = if n < p {
            let gram = xc.matmul_t(&xc)?;
            let tri = Tridiagonal::reduce(&gram)?;
            let values = tri.eigenvalues()?;
            let u = tri.eigenvectors(&values[..k_max])?;
            let mut v = xc.t_matmul(&u)?;
            for c in 0..k_max {
                let norm = (0..p).map(|r| v.get(r, c).powi(2)).sum::<f64>().sqrt();
                if norm > 0.0 {
                    (0..p).for_each(|r| v.set(r, c, v.get(r, c) / norm));
                }
            }
            (values, v)
        } else {
            let gram = xc.t_matmul(&xc)?;
            let top = eig::eig_sym_top(&gram, k_max)?;
            (top.values, top.vectors)
        };
        let lead = values.first().copied().unwrap_or(0.0).max(0.0);
        if let Some(i) = values[..k_max]
            .iter()
            .position(|&v| v <= RANK_TOLERANCE * lead.max(f64::MIN_POSITIVE))
        {
            return Err(Error::Numeric(format!(
                "requested {k_max} components but the centered design has rank {i}"
            )));
        }
        let y_mean = y.iter().sum::<f64>() / n as f64;
        let scores = xc.matmul(&components)?;
        let coefficients = (0..k_max)
            .map(|c| {
                let (mut sy, mut ss) = (0.0, 0.0);
                for i in 0..n {
                    let s = scores.get(i, c);
                    sy += s * (y[i] - y_mean);
                    ss += s * s;
                }
                sy / ss
            })
            .collect();
        Ok(Self {
            means,
            components,
            coefficients,
            y_mean,
        })
    }

    pub fn k_max(&self) -> usize {
        self.coefficients.len()
    }

    pub fn model(&self, k: usize) -> Result<PcrModel> {
        contract!(k >= 1 && k <= self.k_max(), "k must be in 1..={}", self.k_max());
        Ok(PcrModel {
            means: self.means.clone(),
            components: self.components.slice_cols(0, k)?,
            coefficients: self.coefficients[..k].to_vec(),
            intercept: self.y_mean,
        })
    }
}

/// Projects centered `X` on its top `k` principal directions and fits OLS on
/// the scores.
pub fn pcr_fit(x: &Matrix, y: &[f64], k: usize) -> Result<PcrModel> {
    PcrPath::new(x, y, k)?.model(k)
}

/// Largest number of components considered by [`pcr_select`].
pub const PCR_MAX_K: usize = 30;

/// Chooses `k` in `1..=min(30, n, p)` by validation MSE. Ranks the data
/// cannot support are skipped.
pub fn pcr_select(train: &Split, valid: &Split) -> Result<Selected<PcrModel>> {
    let (n, p) = train.x.shape();
    let mut k_max = PCR_MAX_K.min(n).min(p);
    let path = loop {
        match PcrPath::new(&train.x, &train.y, k_max) {
            Ok(path) => break path,
            Err(Error::Numeric(_)) if k_max > 1 => k_max -= 1,
            Err(e) => return Err(e),
        }
    };
    let mut best: Option<Selected<PcrModel>> = None;
    for k in 1..=path.k_max() {
        let model = path.model(k)?;
        let valid_mse = mse(&model.predict(&valid.x)?, &valid.y);
        if best.as_ref().is_none_or(|b| valid_mse < b.valid_mse) {
            best = Some(Selected { model, valid_mse });
        }
    }
    best.ok_or_else(|| Error::Numeric("empty PCR path".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_shrinkage() {
        let x = Matrix::from_rows(&[[1.0, 0.5], [2.0, -1.0], [3.0, 0.0], [4.0, 2.0]]).unwrap();
        let y = [1.0, 3.0, 2.0, 5.0];
        let lmax = LassoSolver::new(&x, &y).unwrap().lambda_max();
        let m = lasso_fit(&x, &y, lmax * 1.0001, 100, 1e-12).unwrap();
        assert!(m.w.iter().all(|&w| w == 0.0));
        assert!((m.intercept - 2.75).abs() < 1e-15);
    }

    #[test]
    fn constant_column_stays_zero() {
        let x = Matrix::from_rows(&[[1.0, 7.0], [2.0, 7.0], [3.0, 7.0]]).unwrap();
        let m = lasso_fit(&x, &[2.0, 4.0, 6.0], 0.0, 1000, 1e-14).unwrap();
        assert_eq!(m.w[1], 0.0);
        assert!((m.w[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn pcr_rank_errors() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]]).unwrap();
        assert!(matches!(pcr_fit(&x, &[1.0, 2.0, 2.0], 2), Err(Error::Numeric(_))));
        assert!(pcr_fit(&x, &[1.0, 2.0, 2.0], 1).is_ok());
        assert!(pcr_fit(&x, &[1.0, 2.0, 2.0], 3).is_err());
    }
}
