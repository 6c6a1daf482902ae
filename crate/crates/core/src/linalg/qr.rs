use super::matrix::{dot, norm, sub_scaled, Matrix};

/// Columns whose orthogonalized remainder falls below this fraction of `‖m‖_F`
/// are treated as linearly dependent and dropped from the basis.
pub const COLUMN_DROP_TOL: f64 = 1e-10;

/// Rank-revealing thin QR: `q` has orthonormal columns spanning the column
/// space of the input, and `q · r` reproduces it.
#[derive(Debug, Clone, PartialEq)]
pub struct QrFactors {
    /// `m × ρ`, where ρ is the number of retained columns.
    pub q: Matrix,
    /// `ρ × n` coefficients of every input column in the `q` basis.
    pub r: Matrix,
}

impl QrFactors {
    pub fn rank(&self) -> usize {
        self.q.cols()
    }

    pub fn reconstruct(&self) -> Matrix {
        self.q.matmul(&self.r).expect("q and r are conformable by construction")
    }
}

/// Modified Gram-Schmidt with one re-orthogonalization pass.
///
/// Rank-deficient input is fine: dependent columns contribute coefficients to
/// `r` but no new basis vector, so `q` ends up with as many columns as the
/// numerical rank. The zero matrix yields an `m × 0` basis and a `0 × n` `r`.
pub fn gram_schmidt_qr(m: &Matrix) -> QrFactors {
    let (rows, cols) = m.shape();
    let drop_tol = COLUMN_DROP_TOL * m.frobenius_norm();

    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut coeff_rows: Vec<Vec<f64>> = Vec::new();

    for j in 0..cols {
        let mut v = m.column(j);
        let mut coeffs = vec![0.0; basis.len()];
        for _pass in 0..2 {
            for (c, q) in coeffs.iter_mut().zip(&basis) {
                let d = dot(q, &v);
                *c += d;
                sub_scaled(&mut v, d, q);
            }
        }
        for (row, c) in coeff_rows.iter_mut().zip(&coeffs) {
            row[j] = *c;
        }

        let len = norm(&v);
        if len > drop_tol && len > 0.0 {
            v.iter_mut().for_each(|x| *x /= len);
            basis.push(v);
            let mut row = vec![0.0; cols];
            row[j] = len;
            coeff_rows.push(row);
        }
    }

    let rank = basis.len();
    let q = Matrix::from_columns(rows, &basis);
    let r = Matrix::new(rank, cols, coeff_rows.concat()).expect("rank x cols coefficients");
    QrFactors { q, r }
}
