//! Test-side oracles. Everything here works on plain nested vectors and
//! shares no code with the library's linear algebra.
#![allow(dead_code)]

use fedlora_core::task::{local_train, Dataset, ToyModel};
use fedlora_core::{
    aggregate, exactness_gap, AggregationResult, ClientState, LoraAdapter, LoraLayer, Matrix, ServerState,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Dense = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn dense(m: &Matrix) -> Dense {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

pub fn from_dense(d: &Dense) -> Matrix {
    let cols = d.first().map_or(0, Vec::len);
    Matrix::new(d.len(), cols, d.iter().flatten().copied().collect()).unwrap()
}

pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Dense {
    (0..rows)
        .map(|_| (0..cols).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

pub fn mul(a: &Dense, b: &Dense) -> Dense {
    let inner = b.len();
    let cols = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), inner);
            (0..cols).map(|j| (0..inner).map(|p| row[p] * b[p][j]).sum()).collect()
        })
        .collect()
}

pub fn transpose(a: &Dense) -> Dense {
    let cols = a.first().map_or(0, Vec::len);
    (0..cols).map(|j| a.iter().map(|row| row[j]).collect()).collect()
}

pub fn axpy(a: &Dense, s: f64, b: &Dense) -> Dense {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + s * q).collect())
        .collect()
}

pub fn fro(a: &Dense) -> f64 {
    a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn fro_diff(a: &Dense, b: &Dense) -> f64 {
    fro(&axpy(a, -1.0, b))
}

/// Eigenvalues of a symmetric matrix by the classical two-sided cyclic Jacobi
/// method, sorted descending.
pub fn sym_eigenvalues(sym: &Dense) -> Vec<f64> {
    let n = sym.len();
    let mut a = sym.clone();
    for _ in 0..200 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let diag: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum();
        if off <= 1e-32 * diag.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in a.iter_mut() {
                    let (akp, akq) = (row[p], row[q]);
                    row[p] = c * akp - s * akq;
                    row[q] = s * akp + c * akq;
                }
                let (head, tail) = a.split_at_mut(q);
                for (apk, aqk) in head[p].iter_mut().zip(tail[0].iter_mut()) {
                    let (x, y) = (*apk, *aqk);
                    *apk = c * x - s * y;
                    *aqk = s * x + c * y;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    eig.sort_by(|x, y| y.partial_cmp(x).unwrap());
    eig
}

/// Singular values, descending, from the eigenvalues of the symmetric
/// embedding `[[0, M], [Mᵀ, 0]]`, whose spectrum is `±σ_i` plus zeros.
/// Absolute accuracy is about `eps · σ_1`, including for tiny `σ_i`.
pub fn singular_values(m: &Dense) -> Vec<f64> {
    let rows = m.len();
    let cols = m.first().map_or(0, Vec::len);
    let size = rows + cols;
    let mut emb = vec![vec![0.0; size]; size];
    for i in 0..rows {
        for j in 0..cols {
            emb[i][rows + j] = m[i][j];
            emb[rows + j][i] = m[i][j];
        }
    }
    let eig = sym_eigenvalues(&emb);
    eig.into_iter().take(rows.min(cols)).map(|x| x.max(0.0)).collect()
}

/// Orthonormal columns spanning a Gaussian `rows × k` draw (classical
/// Gram-Schmidt applied twice).
pub fn random_orthonormal(rows: usize, k: usize, rng: &mut impl Rng) -> Dense {
    let g = transpose(&gaussian(rows, k, 1.0, rng));
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    for mut v in g {
        for _ in 0..2 {
            for q in &basis {
                let d: f64 = v.iter().zip(q).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(q).for_each(|(x, y)| *x -= d * y);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        basis.push(v.into_iter().map(|x| x / n).collect());
    }
    transpose(&basis)
}

/// `W0 + (alpha / r) · B · A` computed from raw factors.
pub fn effective(layer: &LoraLayer) -> Dense {
    let ad = layer.adapter();
    let s = ad.alpha() / ad.rank() as f64;
    axpy(&dense(layer.w0()), s, &mul(&dense(ad.b()), &dense(ad.a())))
}

/// Mean of the clients' effective weights for layer `l`.
pub fn ideal_weight(clients: &[ClientState], l: usize) -> Dense {
    let k = clients.len() as f64;
    let mut acc: Option<Dense> = None;
    for c in clients {
        let w = effective(&c.model.layers()[l]);
        acc = Some(match acc {
            None => w,
            Some(a) => axpy(&a, 1.0, &w),
        });
    }
    acc.unwrap().into_iter().map(|row| row.into_iter().map(|x| x / k).collect()).collect()
}

/// Mean squared error of a linear network given as weight matrices.
pub fn mse(weights: &[Dense], inputs: &Dense, targets: &Dense) -> f64 {
    let mut h = inputs.clone();
    for w in weights {
        h = mul(&h, &transpose(w));
    }
    let count = (h.len() * h[0].len()) as f64;
    fro_diff(&h, targets).powi(2) / count
}

/// Layer with `W0` entries of variance `1/n` and adapter entries of std 0.2,
/// so that `s · B · A` is a moderate perturbation of `W0`.
pub fn random_layer(m: usize, n: usize, r: usize, alpha: f64, rng: &mut impl Rng) -> LoraLayer {
    let a = from_dense(&gaussian(r, n, 0.2, rng));
    let b = from_dense(&gaussian(m, r, 0.2, rng));
    let w0 = from_dense(&gaussian(m, n, 1.0 / (n as f64).sqrt(), rng));
    LoraLayer::new(w0, LoraAdapter::new(a, b, alpha).unwrap()).unwrap()
}

pub fn random_model(dims: &[usize], r: usize, alpha: f64, rng: &mut impl Rng) -> ToyModel {
    let layers = dims
        .windows(2)
        .map(|w| random_layer(w[1], w[0], r.min(w[0]).min(w[1]), alpha, rng))
        .collect();
    ToyModel::new(layers).unwrap()
}

pub fn random_dataset(count: usize, n: usize, m: usize, rng: &mut impl Rng) -> Dataset {
    Dataset::new(
        from_dense(&gaussian(count, n, 1.0, rng)),
        from_dense(&gaussian(count, m, 1.0, rng)),
    )
    .unwrap()
}

/// What happened in one round, observed from outside the library.
pub struct RoundTrace {
    /// Per layer, mean of pre-aggregation effective weights.
    pub ideal: Vec<Dense>,
    pub result: AggregationResult,
    /// Per layer, max over clients of `‖W_i - ideal‖_F / ‖ideal‖_F`.
    pub relative_gap: Vec<f64>,
    /// Library-reported absolute gap.
    pub reported_gap: Vec<f64>,
}

/// Local training for the next round, seeded as `run_round` seeds it.
pub fn train_clients(server: &ServerState, clients: &mut [ClientState]) {
    let round = server.round + 1;
    for c in clients.iter_mut() {
        let mut cfg = c.cfg.clone();
        cfg.seed = fedlora_core::seed::derive(c.cfg.seed, &[round as u64]);
        cfg.freeze_a |= server.strategy.freezes_a();
        local_train(&mut c.model, &c.data, &cfg).unwrap();
    }
}

/// Trains every client locally and aggregates, recording the round from
/// the outside.
pub fn traced_round(server: &mut ServerState, clients: &mut [ClientState]) -> RoundTrace {
    train_clients(server, clients);
    let depth = clients[0].model.depth();
    let ideal: Vec<Dense> = (0..depth).map(|l| ideal_weight(clients, l)).collect();
    let result = aggregate(server, clients).unwrap();
    let relative_gap = (0..depth)
        .map(|l| {
            clients
                .iter()
                .map(|c| fro_diff(&effective(&c.model.layers()[l]), &ideal[l]) / fro(&ideal[l]))
                .fold(0.0, f64::max)
        })
        .collect();
    let reported_gap = exactness_gap(server, clients).unwrap();
    RoundTrace {
        ideal,
        result,
        relative_gap,
        reported_gap,
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
