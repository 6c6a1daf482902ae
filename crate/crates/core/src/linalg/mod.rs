//! Minimal dense linear algebra: products, norms, Gram-Schmidt QR, Jacobi SVD
//! and optimal low-rank truncation. Everything here is a pure function of its
//! inputs.

mod matrix;
mod qr;
mod svd;

pub use matrix::{frobenius_norm, matmul, Matrix};
pub use qr::{gram_schmidt_qr, QrFactors, COLUMN_DROP_TOL};
pub use svd::{
    best_rank_approx, numerical_rank, svd, truncation_error, SvdFactors, DEFAULT_RANK_TOL,
    MAX_SWEEPS, NULL_COLUMN_TOL,
};
