//! Shared fixtures for the criterion benches.

use fedlora_core::{build_federation, ClientState, ExperimentConfig, Matrix, ServerState};

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    Matrix::random_normal(rows, cols, 1.0, &mut fedlora_core::seed::rng(seed, &[]))
}

/// `mean(B_i A_i) - mean(B_i) mean(A_i)` for `k` random `m × r` / `r × n` pairs.
pub fn adapter_residual(k: usize, m: usize, n: usize, r: usize, seed: u64) -> Matrix {
    let pairs: Vec<(Matrix, Matrix)> = (0..k as u64)
        .map(|i| (gaussian(m, r, seed ^ (2 * i)), gaussian(r, n, seed ^ (2 * i + 1))))
        .collect();
    let products: Vec<Matrix> = pairs.iter().map(|(b, a)| b.matmul(a).unwrap()).collect();
    let b_bar = Matrix::mean(pairs.iter().map(|(b, _)| b)).unwrap();
    let a_bar = Matrix::mean(pairs.iter().map(|(_, a)| a)).unwrap();
    Matrix::mean(&products).unwrap().sub(&b_bar.matmul(&a_bar).unwrap()).unwrap()
}

/// Default-sized federation after one local training pass, ready to aggregate.
pub fn trained_federation(cfg: &ExperimentConfig) -> (ServerState, Vec<ClientState>) {
    let (mut server, mut clients) = build_federation(cfg).unwrap();
    fedlora_core::run_round(&mut server, &mut clients).unwrap();
    (server, clients)
}
