//! LoRA adapter algebra.
//!
//! A layer's effective weight is `W0 + (alpha / r) · B · A`. The scale is
//! never folded into `A` or `B`; it is applied when the effective weight is
//! formed and when a residual is merged into `W0`.

use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::seed::SimRng;

/// Standard deviation of the Gaussian used for `A` at initialization.
pub const INIT_STD: f64 = 0.02;

/// Trainable low-rank pair: `a` is `r × n`, `b` is `m × r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    a: Matrix,
    b: Matrix,
    alpha: f64,
}

impl LoraAdapter {
    pub fn new(a: Matrix, b: Matrix, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::contract(format!("alpha must be positive, got {alpha}")));
        }
        check_factor_shapes(&a, &b)?;
        Ok(Self { a, b, alpha })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// `alpha / r`.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// Output dimension `m`.
    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    /// Input dimension `n`.
    pub fn in_dim(&self) -> usize {
        self.a.cols()
    }

    /// Unscaled product `B · A`.
    pub fn product(&self) -> Matrix {
        self.b.matmul(&self.a).expect("adapter factors are conformable")
    }

    /// Replaces both factors, keeping the shapes.
    pub fn set_factors(&mut self, a: Matrix, b: Matrix) -> Result<()> {
        if a.shape() != self.a.shape() || b.shape() != self.b.shape() {
            return Err(Error::DimensionMismatch {
                op: "set_factors",
                left: self.a.shape(),
                right: a.shape(),
            });
        }
        self.a = a;
        self.b = b;
        Ok(())
    }

    pub(crate) fn factors_mut(&mut self) -> (&mut Matrix, &mut Matrix) {
        (&mut self.a, &mut self.b)
    }
}

fn check_factor_shapes(a: &Matrix, b: &Matrix) -> Result<()> {
    let r = a.rows();
    if r == 0 || b.cols() != r {
        return Err(Error::DimensionMismatch {
            op: "lora factors",
            left: b.shape(),
            right: a.shape(),
        });
    }
    let max_rank = b.rows().min(a.cols());
    if r > max_rank {
        return Err(Error::contract(format!(
            "rank {r} exceeds min(m, n) = {max_rank}"
        )));
    }
    Ok(())
}

/// Gaussian `r × n` matrix with the init standard deviation.
pub fn gaussian_a(r: usize, n: usize, seed: u64) -> Matrix {
    let mut rng = SimRng::seed_from_u64(seed);
    Matrix::random_normal(r, n, INIT_STD, &mut rng)
}

/// Standard LoRA init for an `m × n` weight: `B = 0`, `A ~ N(0, 0.02²)`.
pub fn init_adapter(m: usize, n: usize, r: usize, alpha: f64, seed: u64) -> Result<LoraAdapter> {
    if r == 0 || r > m.min(n) {
        return Err(Error::contract(format!(
            "rank {r} must lie in 1..={} for a {m}x{n} weight",
            m.min(n)
        )));
    }
    LoraAdapter::new(gaussian_a(r, n, seed), Matrix::zeros(m, r), alpha)
}

/// Frozen base weight plus adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    w0: Matrix,
    adapter: LoraAdapter,
}

impl LoraLayer {
    pub fn new(w0: Matrix, adapter: LoraAdapter) -> Result<Self> {
        if w0.shape() != (adapter.out_dim(), adapter.in_dim()) {
            return Err(Error::DimensionMismatch {
                op: "lora layer",
                left: w0.shape(),
                right: (adapter.out_dim(), adapter.in_dim()),
            });
        }
        Ok(Self { w0, adapter })
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn adapter(&self) -> &LoraAdapter {
        &self.adapter
    }

    pub fn adapter_mut(&mut self) -> &mut LoraAdapter {
        &mut self.adapter
    }

    pub fn shape(&self) -> (usize, usize) {
        self.w0.shape()
    }

    /// `W0 + (alpha / r) · B · A`.
    pub fn effective_weight(&self) -> Matrix {
        let mut w = self.w0.clone();
        w.add_scaled_in_place(self.adapter.scaling(), &self.adapter.product())
            .expect("w0 matches adapter shape");
        w
    }

    /// `W0 += (alpha / r) · residual`, with `residual` in unscaled `B·A` units.
    /// The adapter is left alone.
    pub fn merge_residual(&mut self, residual: &Matrix) -> Result<()> {
        if residual.shape() != self.w0.shape() {
            return Err(Error::DimensionMismatch {
                op: "merge_residual",
                left: self.w0.shape(),
                right: residual.shape(),
            });
        }
        self.w0.add_scaled_in_place(self.adapter.scaling(), residual)
    }
}
