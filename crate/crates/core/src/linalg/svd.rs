//! One-sided (Hestenes) Jacobi SVD and the truncated reconstructions built on it.

use super::matrix::{dot, norm, sub_scaled, Matrix};
use crate::error::{Error, Result};

/// Sweep cap for the Jacobi iteration.
pub const MAX_SWEEPS: usize = 100;

/// Columns with norm below this fraction of `‖m‖_F` are numerically null: they
/// take no part in rotations and receive completed singular vectors.
pub const NULL_COLUMN_TOL: f64 = 1e-12;

/// Relative threshold used by [`numerical_rank`] when callers have no opinion.
pub const DEFAULT_RANK_TOL: f64 = 1e-9;

/// Thin SVD `m = u · diag(sigma) · vt` with `p = min(rows, cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    /// `rows × p`, orthonormal columns.
    pub u: Matrix,
    /// Non-increasing, non-negative.
    pub sigma: Vec<f64>,
    /// `p × cols`, orthonormal rows.
    pub vt: Matrix,
}

impl SvdFactors {
    /// `u[:, ..k] · diag(sigma[..k]) · vt[..k, :]`.
    pub fn reconstruct_rank(&self, k: usize) -> Matrix {
        let k = k.min(self.sigma.len());
        let (m, n) = (self.u.rows(), self.vt.cols());
        let mut out = Matrix::zeros(m, n);
        let data = out.data_mut();
        for t in 0..k {
            let s = self.sigma[t];
            if s == 0.0 {
                continue;
            }
            let vt_row = self.vt.row(t);
            for i in 0..m {
                let coef = s * self.u.get(i, t);
                let row = &mut data[i * n..(i + 1) * n];
                for (o, &v) in row.iter_mut().zip(vt_row) {
                    *o += coef * v;
                }
            }
        }
        out
    }

    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_rank(self.sigma.len())
    }
}

/// Frobenius error of the best rank-`k` approximation: `sqrt(Σ_{i>k} σ_i²)`.
pub fn truncation_error(sigma: &[f64], k: usize) -> f64 {
    sigma.iter().skip(k).map(|s| s * s).sum::<f64>().sqrt()
}

/// Singular value decomposition by one-sided Jacobi rotations.
pub fn svd(m: &Matrix) -> Result<SvdFactors> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::contract(format!("svd of an empty {rows}x{cols} matrix")));
    }
    if rows < cols {
        // m = (mᵀ)ᵀ = (U Σ Vᵀ)ᵀ = V Σ Uᵀ
        let t = svd_tall(&m.transpose())?;
        return Ok(SvdFactors {
            u: t.vt.transpose(),
            sigma: t.sigma,
            vt: t.u.transpose(),
        });
    }
    svd_tall(m)
}

fn svd_tall(m: &Matrix) -> Result<SvdFactors> {
    let (rows, cols) = m.shape();
    let fro = m.frobenius_norm();
    let null_norm = NULL_COLUMN_TOL * fro;
    let null_sq = null_norm * null_norm;
    let ortho_tol = rows as f64 * f64::EPSILON;

    let mut work: Vec<Vec<f64>> = (0..cols).map(|j| m.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| {
            let mut e = vec![0.0; cols];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = fro == 0.0;
    let mut sweep = 0;
    while !converged && sweep < MAX_SWEEPS {
        sweep += 1;
        let mut rotated = false;
        for i in 0..cols {
            for j in i + 1..cols {
                let alpha = dot(&work[i], &work[i]);
                let beta = dot(&work[j], &work[j]);
                if alpha.min(beta) <= null_sq {
                    continue;
                }
                let gamma = dot(&work[i], &work[j]);
                if gamma.abs() <= ortho_tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut work, i, j, c, s);
                rotate(&mut v, i, j, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::NoConvergence { sweeps: MAX_SWEEPS });
    }

    let norms: Vec<f64> = work.iter().map(|c| norm(c)).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut pending = Vec::new();
    let mut sigma = Vec::with_capacity(cols);
    for (slot, &j) in order.iter().enumerate() {
        let s = norms[j];
        sigma.push(s);
        if s > null_norm && s > 0.0 {
            u_cols.push(work[j].iter().map(|x| x / s).collect());
        } else {
            u_cols.push(Vec::new());
            pending.push(slot);
        }
    }
    complete_basis(rows, &mut u_cols, &pending);

    let u = Matrix::from_columns(rows, &u_cols);
    let vt = Matrix::from_fn(cols, cols, |t, k| v[order[t]][k]);
    Ok(SvdFactors { u, sigma, vt })
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(j);
    let (ci, cj) = (&mut left[i], &mut right[0]);
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let (xi, yj) = (*x, *y);
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

/// Fills the empty slots listed in `pending` with unit vectors orthogonal to
/// every other column, choosing the coordinate axis with the largest remainder.
fn complete_basis(rows: usize, cols: &mut [Vec<f64>], pending: &[usize]) {
    for &slot in pending {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for axis in 0..rows {
            let mut e = vec![0.0; rows];
            e[axis] = 1.0;
            for _pass in 0..2 {
                for q in cols.iter().filter(|c| !c.is_empty()) {
                    let d = dot(q, &e);
                    sub_scaled(&mut e, d, q);
                }
            }
            let len = norm(&e);
            if best.as_ref().is_none_or(|(b, _)| len > *b) {
                best = Some((len, e));
            }
        }
        let (len, mut e) = best.expect("rows >= 1");
        e.iter_mut().for_each(|x| *x /= len);
        cols[slot] = e;
    }
}

/// Optimal rank-`target` approximation in Frobenius norm (truncated SVD).
pub fn best_rank_approx(m: &Matrix, target: usize) -> Result<Matrix> {
    let p = m.rows().min(m.cols());
    if target > p {
        return Err(Error::contract(format!(
            "target rank {target} exceeds min(rows, cols) = {p}"
        )));
    }
    if target == 0 {
        return Ok(Matrix::zeros(m.rows(), m.cols()));
    }
    Ok(svd(m)?.reconstruct_rank(target))
}

/// Number of singular values strictly greater than `rel_tol · σ_max`.
pub fn numerical_rank(m: &Matrix, rel_tol: f64) -> Result<usize> {
    if rel_tol <= 0.0 || rel_tol.is_nan() {
        return Err(Error::contract(format!("rel_tol must be positive, got {rel_tol}")));
    }
    if m.rows() == 0 || m.cols() == 0 || m.frobenius_norm() == 0.0 {
        return Ok(0);
    }
    let sigma = svd(m)?.sigma;
    let cutoff = rel_tol * sigma[0];
    Ok(sigma.iter().filter(|&&s| s > cutoff).count())
}
