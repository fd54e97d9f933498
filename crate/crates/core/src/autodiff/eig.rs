//! Symmetric eigendecomposition and its reverse-mode adjoint.
//!
//! Two independent routes are provided:
//!
//! * [`eig_sym`]: cyclic Jacobi rotations, full spectrum and all vectors.
//! * [`Tridiagonal`]: Householder reduction, implicit-shift QL for the
//!   eigenvalues and inverse iteration for a leading subset of vectors. This
//!   is what the PCA layer uses, because it only ever needs the top `k`
//!   vectors of covariance matrices that can be a few thousand wide.
//!
//! Both return eigenvalues in descending order and orient every eigenvector so
//! that its largest-magnitude entry is non-negative.

use crate::error::{contract, Error, Result};

use super::Matrix;

/// Relative asymmetry tolerated on input before symmetrization.
pub const SYMMETRY_TOLERANCE: f64 = 1e-9;
/// Smallest eigengap for which the eigenvector adjoint is evaluated.
pub const EIGENGAP_THRESHOLD: f64 = 1e-10;

const MAX_JACOBI_SWEEPS: usize = 100;
const MAX_QL_ITERATIONS: usize = 60;
const INVERSE_ITERATIONS: usize = 3;

/// Eigenvalues (descending) and the matching eigenvectors as columns.
#[derive(Clone, Debug, PartialEq)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

/// Checks squareness and symmetry, returning `(A + Aᵀ)/2`.
pub fn symmetrized(a: &Matrix) -> Result<Matrix> {
    contract!(
        a.rows() == a.cols(),
        "eigendecomposition needs a square matrix, got {}x{}",
        a.rows(),
        a.cols()
    );
    let scale = a.max_abs().max(1.0);
    let asym = a.asymmetry();
    contract!(
        asym <= SYMMETRY_TOLERANCE * scale,
        "matrix is not symmetric (max asymmetry {asym:e})"
    );
    a.ensure_finite("eigendecomposition input")?;
    let mut s = a.clone();
    s.symmetrize_in_place()?;
    Ok(s)
}

/// Full symmetric eigendecomposition by cyclic Jacobi rotations.
pub fn eig_sym(a: &Matrix) -> Result<SymEigen> {
    let mut a = symmetrized(a)?;
    let n = a.rows();
    let mut v = Matrix::identity(n);
    if n == 0 {
        return Ok(SymEigen {
            values: vec![],
            vectors: v,
        });
    }
    let total = a.frobenius_norm();
    let mut converged = false;
    for _ in 0..MAX_JACOBI_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| a.get(i, j).powi(2))
            .sum::<f64>()
            .sqrt();
        if off == 0.0 || off <= 1e-15 * total {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut a, &mut v, p, q, c, s, t, apq);
            }
        }
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "Jacobi eigensolver did not converge within {MAX_JACOBI_SWEEPS} sweeps"
        )));
    }
    let values: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    Ok(sort_descending(values, v))
}

#[allow(clippy::too_many_arguments)]
fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize, c: f64, s: f64, t: f64, apq: f64) {
    let n = a.rows();
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = a.get(k, p);
        let akq = a.get(k, q);
        let new_kp = c * akp - s * akq;
        let new_kq = s * akp + c * akq;
        a.set(k, p, new_kp);
        a.set(p, k, new_kp);
        a.set(k, q, new_kq);
        a.set(q, k, new_kq);
    }
    a.set(p, p, a.get(p, p) - t * apq);
    a.set(q, q, a.get(q, q) + t * apq);
    a.set(p, q, 0.0);
    a.set(q, p, 0.0);
    for k in 0..n {
        let vkp = v.get(k, p);
        let vkq = v.get(k, q);
        v.set(k, p, c * vkp - s * vkq);
        v.set(k, q, s * vkp + c * vkq);
    }
}

fn sort_descending(values: Vec<f64>, vectors: Matrix) -> SymEigen {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]).then(i.cmp(&j)));
    let sorted: Vec<f64> = order.iter().map(|&i| values[i]).collect();
    let mut out = Matrix::zeros(vectors.rows(), n);
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..vectors.rows() {
            out.set(r, dst, vectors.get(r, src));
        }
    }
    orient_columns(&mut out);
    SymEigen {
        values: sorted,
        vectors: out,
    }
}

/// Flips each column so that its largest-magnitude entry is non-negative.
/// Ties go to the first such entry.
pub fn orient_columns(v: &mut Matrix) {
    for c in 0..v.cols() {
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for r in 0..v.rows() {
            let x = v.get(r, c).abs();
            if x > best_abs {
                best_abs = x;
                best = r;
            }
        }
        if v.rows() > 0 && v.get(best, c) < 0.0 {
            for r in 0..v.rows() {
                v.set(r, c, -v.get(r, c));
            }
        }
    }
}

/// Smallest absolute difference between any two eigenvalues.
pub fn min_eigengap(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
}

/// Adjoint of the symmetric eigendecomposition.
///
/// Given cotangents for the eigenvalues and the eigenvector matrix, returns
/// the symmetric cotangent of the decomposed matrix:
///
/// ```text
/// Ā = V (diag(λ̄) + F ∘ (Vᵀ V̄)) Vᵀ,   F_ij = 1/(λ_j − λ_i) (i ≠ j), F_ii = 0
/// ```
///
/// The result is symmetrized. Fails with [`Error::Stability`] when two
/// eigenvalues are closer than [`EIGENGAP_THRESHOLD`], since `F` blows up.
pub fn eig_sym_backward(
    values: &[f64],
    vectors: &Matrix,
    grad_values: &[f64],
    grad_vectors: &Matrix,
) -> Result<Matrix> {
    let n = values.len();
    contract!(
        vectors.shape() == (n, n),
        "eigenvector matrix must be {n}x{n}, got {:?}",
        vectors.shape()
    );
    contract!(grad_values.len() == n, "grad_values length mismatch");
    contract!(
        grad_vectors.shape() == (n, n),
        "grad_vectors must be {n}x{n}, got {:?}",
        grad_vectors.shape()
    );
    let gap = min_eigengap(values);
    if gap <= EIGENGAP_THRESHOLD {
        return Err(Error::Stability {
            gap,
            threshold: EIGENGAP_THRESHOLD,
        });
    }
    let mut inner = vectors.t_matmul(grad_vectors)?;
    for i in 0..n {
        for j in 0..n {
            let f = if i == j { 0.0 } else { 1.0 / (values[j] - values[i]) };
            inner.set(i, j, inner.get(i, j) * f);
        }
        inner.set(i, i, inner.get(i, i) + grad_values[i]);
    }
    let mut out = vectors.matmul(&inner)?.matmul_t(vectors)?;
    out.symmetrize_in_place()?;
    Ok(out)
}

/// A symmetric matrix reduced to tridiagonal form `T = Qᵀ A Q`, with `Q`
/// kept implicitly as a product of Householder reflectors.
#[derive(Clone, Debug)]
pub struct Tridiagonal {
    diag: Vec<f64>,
    sub: Vec<f64>,
    /// Reflector `j` acts on coordinates `j+1..n`: `H = I - beta v vᵀ`.
    reflectors: Vec<Option<(Vec<f64>, f64)>>,
}

impl Tridiagonal {
    /// Householder reduction of a symmetric matrix. Only the lower triangle
    /// of the trailing block is updated, halving memory traffic.
    pub fn reduce(a: &Matrix) -> Result<Self> {
        let a = symmetrized(a)?;
        let n = a.rows();
        let mut w = a.into_data();
        let mut sub = vec![0.0; n.saturating_sub(1)];
        let mut reflectors = Vec::with_capacity(n.saturating_sub(2));
        for j in 0..n.saturating_sub(2) {
            let m = n - j - 1;
            let x: Vec<f64> = (0..m).map(|r| w[(j + 1 + r) * n + j]).collect();
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let tail = x[1..].iter().map(|v| v * v).sum::<f64>();
            if norm == 0.0 || tail == 0.0 {
                sub[j] = x[0];
                reflectors.push(None);
                continue;
            }
            let alpha = if x[0] >= 0.0 { -norm } else { norm };
            let mut v = x;
            v[0] -= alpha;
            let vtv: f64 = v.iter().map(|t| t * t).sum();
            let beta = 2.0 / vtv;
            // p = beta * T v using the lower triangle of the trailing block.
            let off = j + 1;
            let mut p = vec![0.0; m];
            for r in 0..m {
                let row = &w[(off + r) * n + off..(off + r) * n + off + r + 1];
                let vr = v[r];
                let mut acc = 0.0;
                for c in 0..r {
                    let arc = row[c];
                    acc += arc * v[c];
                    p[c] += arc * vr;
                }
                acc += row[r] * vr;
                p[r] += acc;
            }
            p.iter_mut().for_each(|t| *t *= beta);
            let k = 0.5 * beta * v.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>();
            let wv: Vec<f64> = p.iter().zip(&v).map(|(pi, vi)| pi - k * vi).collect();
            for r in 0..m {
                let row = &mut w[(off + r) * n + off..(off + r) * n + off + r + 1];
                let (vr, wr) = (v[r], wv[r]);
                for c in 0..=r {
                    row[c] -= vr * wv[c] + wr * v[c];
                }
            }
            sub[j] = alpha;
            reflectors.push(Some((v, beta)));
        }
        if n >= 2 {
            sub[n - 2] = w[(n - 1) * n + (n - 2)];
        }
        let diag = (0..n).map(|i| w[i * n + i]).collect();
        Ok(Self { diag, sub, reflectors })
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    /// All eigenvalues, descending, by implicit-shift QL.
    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        let n = self.dim();
        let mut d = self.diag.clone();
        let mut e = vec![0.0; n];
        e[..n.saturating_sub(1)].copy_from_slice(&self.sub);
        let mut f = 0.0;
        let mut tst1: f64 = 0.0;
        let eps = f64::EPSILON;
        for l in 0..n {
            tst1 = tst1.max(d[l].abs() + e[l].abs());
            let mut m = l;
            while m < n {
                if e[m].abs() <= eps * tst1 {
                    break;
                }
                m += 1;
            }
            if m > l {
                let mut iter = 0;
                loop {
                    iter += 1;
                    if iter > MAX_QL_ITERATIONS {
                        return Err(Error::Numeric("tridiagonal QL iteration did not converge".into()));
                    }
                    let g = d[l];
                    let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                    let mut r = p.hypot(1.0);
                    if p < 0.0 {
                        r = -r;
                    }
                    d[l] = e[l] / (p + r);
                    d[l + 1] = e[l] * (p + r);
                    let dl1 = d[l + 1];
                    let h = g - d[l];
                    for di in d.iter_mut().skip(l + 2) {
                        *di -= h;
                    }
                    f += h;
                    p = d[m];
                    let mut c = 1.0;
                    let mut c2 = c;
                    let mut c3 = c;
                    let el1 = e[l + 1];
                    let mut s = 0.0;
                    let mut s2 = 0.0;
                    for i in (l..m).rev() {
                        c3 = c2;
                        c2 = c;
                        s2 = s;
                        let g = c * e[i];
                        let h = c * p;
                        r = p.hypot(e[i]);
                        e[i + 1] = s * r;
                        s = e[i] / r;
                        c = p / r;
                        p = c * d[i] - s * g;
                        d[i + 1] = h + s * (c * g + s * d[i]);
                    }
                    p = -s * s2 * c3 * el1 * e[l] / dl1;
                    e[l] = s * p;
                    d[l] = c * p;
                    if e[l].abs() <= eps * tst1 {
                        break;
                    }
                }
            }
            d[l] += f;
            e[l] = 0.0;
        }
        if d.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite eigenvalue".into()));
        }
        d.sort_by(|a, b| b.total_cmp(a));
        Ok(d)
    }

    /// Eigenvectors of the original matrix for the given eigenvalues, by
    /// inverse iteration on `T` followed by back-transformation with `Q`.
    /// Vectors are Gram-Schmidt orthogonalized against earlier ones.
    pub fn eigenvectors(&self, values: &[f64]) -> Result<Matrix> {
        let n = self.dim();
        let norm = self
            .diag
            .iter()
            .enumerate()
            .map(|(i, d)| {
                d.abs()
                    + if i > 0 { self.sub[i - 1].abs() } else { 0.0 }
                    + if i + 1 < n { self.sub[i].abs() } else { 0.0 }
            })
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE);
        let mut found: Vec<Vec<f64>> = Vec::with_capacity(values.len());
        for (idx, &lambda) in values.iter().enumerate() {
            let lu = TridiagonalLu::factor(&self.diag, &self.sub, lambda, norm);
            let mut x: Vec<f64> = (0..n)
                .map(|i| 1.0 + 0.5 * (((i * 7 + idx * 13) % 17) as f64 / 17.0))
                .collect();
            for _ in 0..INVERSE_ITERATIONS {
                lu.solve(&mut x);
                for prev in &found {
                    project_out(&mut x, prev);
                    project_out(&mut x, prev);
                }
                let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !(nx.is_finite() && nx > 0.0) {
                    return Err(Error::Numeric(format!(
                        "inverse iteration failed for eigenvalue {lambda}"
                    )));
                }
                x.iter_mut().for_each(|v| *v /= nx);
            }
            found.push(x);
        }
        let mut out = Matrix::zeros(n, values.len());
        for (c, y) in found.into_iter().enumerate() {
            let x = self.apply_q(y);
            for (r, v) in x.into_iter().enumerate() {
                out.set(r, c, v);
            }
        }
        orient_columns(&mut out);
        Ok(out)
    }

    /// `Q y = H_0 H_1 ... H_{n-3} y`.
    fn apply_q(&self, mut y: Vec<f64>) -> Vec<f64> {
        for (j, refl) in self.reflectors.iter().enumerate().rev() {
            if let Some((v, beta)) = refl {
                let seg = &mut y[j + 1..];
                let dot: f64 = v.iter().zip(seg.iter()).map(|(a, b)| a * b).sum();
                let s = beta * dot;
                for (yi, vi) in seg.iter_mut().zip(v) {
                    *yi -= s * vi;
                }
            }
        }
        y
    }
}

fn project_out(x: &mut [f64], unit: &[f64]) {
    let dot: f64 = x.iter().zip(unit).map(|(a, b)| a * b).sum();
    for (xi, ui) in x.iter_mut().zip(unit) {
        *xi -= dot * ui;
    }
}

/// LU factorization with partial pivoting of `T - σI` for tridiagonal `T`.
struct TridiagonalLu {
    d: Vec<f64>,
    du: Vec<f64>,
    du2: Vec<f64>,
    dl: Vec<f64>,
    swapped: Vec<bool>,
}

impl TridiagonalLu {
    fn factor(diag: &[f64], sub: &[f64], shift: f64, norm: f64) -> Self {
        let n = diag.len();
        let tiny = f64::EPSILON * norm;
        let mut d: Vec<f64> = diag.iter().map(|v| v - shift).collect();
        let mut du = sub.to_vec();
        let mut dl = sub.to_vec();
        let mut du2 = vec![0.0; n.saturating_sub(2)];
        let mut swapped = vec![false; n.saturating_sub(1)];
        for i in 0..n.saturating_sub(1) {
            if d[i].abs() >= dl[i].abs() {
                if d[i] == 0.0 {
                    d[i] = tiny;
                }
                let fact = dl[i] / d[i];
                dl[i] = fact;
                d[i + 1] -= fact * du[i];
            } else {
                let fact = d[i] / dl[i];
                d[i] = dl[i];
                dl[i] = fact;
                let temp = du[i];
                du[i] = d[i + 1];
                d[i + 1] = temp - fact * d[i + 1];
                if i + 2 < n {
                    du2[i] = du[i + 1];
                    du[i + 1] = -fact * du[i + 1];
                }
                swapped[i] = true;
            }
        }
        for v in d.iter_mut() {
            if *v == 0.0 {
                *v = tiny;
            }
        }
        Self {
            d,
            du,
            du2,
            dl,
            swapped,
        }
    }

    fn solve(&self, b: &mut [f64]) {
        let n = self.d.len();
        for i in 0..n.saturating_sub(1) {
            if self.swapped[i] {
                let temp = b[i];
                b[i] = b[i + 1];
                b[i + 1] = temp - self.dl[i] * b[i];
            } else {
                b[i + 1] -= self.dl[i] * b[i];
            }
        }
        if n == 0 {
            return;
        }
        b[n - 1] /= self.d[n - 1];
        if n > 1 {
            b[n - 2] = (b[n - 2] - self.du[n - 2] * b[n - 1]) / self.d[n - 2];
        }
        for i in (0..n.saturating_sub(2)).rev() {
            b[i] = (b[i] - self.du[i] * b[i + 1] - self.du2[i] * b[i + 2]) / self.d[i];
        }
        // Rescale to keep the iterate representable near exact eigenvalues.
        let m = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if m > 1e100 || (m > 0.0 && m < 1e-100) {
            b.iter_mut().for_each(|v| *v /= m);
        }
    }
}

/// All eigenvalues plus the leading `k` eigenvectors, via [`Tridiagonal`].
pub fn eig_sym_top(a: &Matrix, k: usize) -> Result<SymEigen> {
    contract!(
        k <= a.rows(),
        "requested {k} eigenvectors of a {}x{} matrix",
        a.rows(),
        a.cols()
    );
    let tri = Tridiagonal::reduce(a)?;
    let values = tri.eigenvalues()?;
    let vectors = tri.eigenvectors(&values[..k])?;
    Ok(SymEigen { values, vectors })
}
