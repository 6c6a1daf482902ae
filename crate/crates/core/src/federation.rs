//! Synchronous federation: clients train locally, the server aggregates.
//!
//! All aggregation happens in unscaled `B·A` units. The `alpha / r` scale only
//! enters through [`LoraLayer::effective_weight`] and
//! [`LoraLayer::merge_residual`], so an unscaled residual merged into `W0`
//! restores the exact average of the clients' effective weights.

use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{best_rank_approx, gram_schmidt_qr, numerical_rank, Matrix, QrFactors, DEFAULT_RANK_TOL};
use crate::lora::{gaussian_a, LoraLayer};
use crate::metrics::{comm_cost, divergence_norm, residual_is_factored, CommLedger, RoundReport};
use crate::seed;
use crate::task::{local_train, Dataset, ToyModel, TrainConfig};

/// How FedEx-LoRA hands adapters back to clients after aggregation. Every
/// variant offsets `W0` so that all clients end up with the same effective
/// weight; they differ in what the adapters look like afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Assignment {
    /// `A_i, B_i ← mean(A), mean(B)` and `W0 += residual`.
    #[default]
    Average,
    /// Fresh `B = 0`, Gaussian `A`; the full mean update goes into `W0`.
    Reinitialize,
    /// Each client keeps its own `A_i, B_i` and absorbs its own offset.
    KeepLocal,
}

impl Assignment {
    pub fn tag(self) -> &'static str {
        match self {
            Assignment::Average => "average",
            Assignment::Reinitialize => "reinit",
            Assignment::KeepLocal => "keep-local",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AggregationStrategy {
    /// Averages full effective weights. Ground truth, not a LoRA method.
    DenseOracle,
    /// Averages `A` and `B` independently.
    FedIt,
    /// `A` frozen at its shared init; only `B` is trained and averaged.
    FfaLora,
    /// Averages adapters and folds the exact residual into `W0`.
    FedExLora(Assignment),
    /// FedEx-LoRA with the residual replaced by its best rank-`rank` approximation.
    FedExTruncated { rank: usize },
}

impl AggregationStrategy {
    pub fn tag(&self) -> &'static str {
        match self {
            AggregationStrategy::DenseOracle => "dense-oracle",
            AggregationStrategy::FedIt => "fedit",
            AggregationStrategy::FfaLora => "ffa-lora",
            AggregationStrategy::FedExLora(_) => "fedex-lora",
            AggregationStrategy::FedExTruncated { .. } => "fedex-trunc",
        }
    }

    pub fn freezes_a(&self) -> bool {
        matches!(self, AggregationStrategy::FfaLora)
    }
}

impl fmt::Display for AggregationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AggregationStrategy::FedExLora(a) if *a != Assignment::Average => {
                write!(f, "fedex-lora[{}]", a.tag())
            }
            AggregationStrategy::FedExTruncated { rank } => write!(f, "fedex-trunc[{rank}]"),
            other => f.write_str(other.tag()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub model: ToyModel,
    pub data: Dataset,
    pub cfg: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub strategy: AggregationStrategy,
    /// Completed aggregation rounds.
    pub round: usize,
    /// Per layer, the average of the clients' effective weights at the last
    /// aggregation. Used for exactness and divergence metrics only.
    pub reference_dense: Vec<Matrix>,
    /// Seeds the fresh `A` drawn by strategies that reinitialize adapters.
    pub seed: u64,
}

impl ServerState {
    pub fn new(strategy: AggregationStrategy, seed: u64) -> Self {
        Self {
            strategy,
            round: 0,
            reference_dense: Vec::new(),
            seed,
        }
    }
}

/// What the server computed for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAggregate {
    pub a_global: Matrix,
    pub b_global: Matrix,
    /// Unscaled matrix merged into every client's `W0` (zero when nothing is merged).
    /// For [`Assignment::KeepLocal`] this is the shared `mean(BA) - mean(B) mean(A)`;
    /// the per-client offsets are derived from it.
    pub residual: Matrix,
    /// Present when the residual travels as `q · r` instead of densely.
    pub residual_factors: Option<QrFactors>,
    /// Numerical rank of what was merged into `W0` (max over clients).
    pub merged_rank: usize,
    pub comm: CommLedger,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregationResult {
    pub layers: Vec<LayerAggregate>,
    /// Sum over layers.
    pub comm: CommLedger,
}

/// Checks that clients are non-empty and structurally identical. Returns `k`.
fn check_clients(clients: &[ClientState]) -> Result<usize> {
    let first = clients
        .first()
        .ok_or_else(|| Error::contract("aggregation needs at least one client"))?;
    let reference = &first.model;
    for c in &clients[1..] {
        if c.model.depth() != reference.depth() {
            return Err(Error::contract(format!(
                "client {} has {} layers, client {} has {}",
                c.id,
                c.model.depth(),
                first.id,
                reference.depth()
            )));
        }
        for (l, (x, y)) in c.model.layers().iter().zip(reference.layers()).enumerate() {
            let (ax, ay) = (x.adapter(), y.adapter());
            if x.shape() != y.shape() || ax.rank() != ay.rank() || ax.alpha() != ay.alpha() {
                return Err(Error::contract(format!(
                    "client {} layer {l} does not match client {}",
                    c.id, first.id
                )));
            }
        }
    }
    Ok(clients.len())
}

fn layer_of(c: &ClientState, l: usize) -> &LoraLayer {
    &c.model.layers()[l]
}

/// Uniform means of `A_i` and `B_i` for layer `l`.
fn layer_averages(clients: &[ClientState], l: usize) -> Result<(Matrix, Matrix)> {
    let a = Matrix::mean(clients.iter().map(|c| layer_of(c, l).adapter().a()))?;
    let b = Matrix::mean(clients.iter().map(|c| layer_of(c, l).adapter().b()))?;
    Ok((a, b))
}

fn layer_mean_product(clients: &[ClientState], l: usize) -> Result<Matrix> {
    let products: Vec<Matrix> = clients.iter().map(|c| layer_of(c, l).adapter().product()).collect();
    Matrix::mean(&products)
}

/// `mean(B_i A_i) - mean(B_i) · mean(A_i)` for layer `l`.
pub(crate) fn layer_residual(clients: &[ClientState], l: usize) -> Result<Matrix> {
    let (a, b) = layer_averages(clients, l)?;
    layer_mean_product(clients, l)?.sub(&b.matmul(&a)?)
}

/// Per layer `(mean(A_i), mean(B_i))`.
pub fn average_adapters(clients: &[ClientState]) -> Result<Vec<(Matrix, Matrix)>> {
    check_clients(clients)?;
    (0..clients[0].model.depth())
        .map(|l| layer_averages(clients, l))
        .collect()
}

/// Per layer mean of products minus product of means, in unscaled units.
pub fn compute_residual(clients: &[ClientState]) -> Result<Vec<Matrix>> {
    check_clients(clients)?;
    (0..clients[0].model.depth())
        .map(|l| layer_residual(clients, l))
        .collect()
}

/// Factors `m` when the crossover rule says so and returns what the client
/// reconstructs on its side.
fn transmit(m: Matrix, factored: bool) -> (Matrix, Option<QrFactors>) {
    if factored {
        let qr = gram_schmidt_qr(&m);
        (qr.reconstruct(), Some(qr))
    } else {
        (m, None)
    }
}

/// Aggregates the clients' current adapters under `server.strategy`, writes
/// the result back into every client and advances `server.round`.
pub fn aggregate(server: &mut ServerState, clients: &mut [ClientState]) -> Result<AggregationResult> {
    let k = check_clients(clients)?;
    let depth = clients[0].model.depth();
    let strategy = server.strategy;
    let next_round = server.round + 1;

    if let AggregationStrategy::FedExTruncated { rank } = strategy {
        let r = layer_of(&clients[0], 0).adapter().rank();
        if rank == 0 || rank > k * r {
            return Err(Error::contract(format!(
                "truncation rank {rank} must lie in 1..={}",
                k * r
            )));
        }
    }

    let mut reference = Vec::with_capacity(depth);
    let mut layers = Vec::with_capacity(depth);
    for l in 0..depth {
        let (m, n) = layer_of(&clients[0], l).shape();
        let r = layer_of(&clients[0], l).adapter().rank();
        let ideal = Matrix::mean(&clients.iter().map(|c| layer_of(c, l).effective_weight()).collect::<Vec<_>>())?;
        let (a_avg, b_avg) = layer_averages(clients, l)?;
        let mean_product = layer_mean_product(clients, l)?;
        let exact_residual = mean_product.sub(&b_avg.matmul(&a_avg)?)?;
        let factored = residual_is_factored(&strategy, k, m, n, r);

        let agg = match strategy {
            AggregationStrategy::DenseOracle => {
                let a_fresh = gaussian_a(r, n, seed::derive(server.seed, &[seed::REINIT, next_round as u64, l as u64]));
                let b_zero = Matrix::zeros(m, r);
                let mut merged_rank = 0;
                for c in clients.iter_mut() {
                    let layer = &mut c.model.layers_mut()[l];
                    let s = layer.adapter().scaling();
                    let offset = ideal.sub(layer.w0())?.scale(1.0 / s);
                    merged_rank = merged_rank.max(numerical_rank(&offset, DEFAULT_RANK_TOL)?);
                    layer.merge_residual(&offset)?;
                    layer.adapter_mut().set_factors(a_fresh.clone(), b_zero.clone())?;
                }
                LayerAggregate {
                    a_global: a_fresh,
                    b_global: b_zero,
                    residual: mean_product,
                    residual_factors: None,
                    merged_rank,
                    comm: comm_cost(&strategy, k, m, n, r, merged_rank),
                }
            }
            AggregationStrategy::FedIt => {
                for c in clients.iter_mut() {
                    c.model.layers_mut()[l]
                        .adapter_mut()
                        .set_factors(a_avg.clone(), b_avg.clone())?;
                }
                LayerAggregate {
                    a_global: a_avg,
                    b_global: b_avg,
                    residual: Matrix::zeros(m, n),
                    residual_factors: None,
                    merged_rank: 0,
                    comm: comm_cost(&strategy, k, m, n, r, 0),
                }
            }
            AggregationStrategy::FfaLora => {
                let a_shared = layer_of(&clients[0], l).adapter().a().clone();
                for c in clients.iter_mut() {
                    let ad = c.model.layers_mut()[l].adapter_mut();
                    if ad.a() != &a_shared {
                        return Err(Error::contract(format!(
                            "FFA-LoRA client {} has drifted from the shared A in layer {l}",
                            c.id
                        )));
                    }
                    ad.set_factors(a_shared.clone(), b_avg.clone())?;
                }
                LayerAggregate {
                    a_global: a_shared,
                    b_global: b_avg,
                    residual: Matrix::zeros(m, n),
                    residual_factors: None,
                    merged_rank: 0,
                    comm: comm_cost(&strategy, k, m, n, r, 0),
                }
            }
            AggregationStrategy::FedExLora(Assignment::Average) | AggregationStrategy::FedExTruncated { .. } => {
                let residual = match strategy {
                    AggregationStrategy::FedExTruncated { rank } => {
                        best_rank_approx(&exact_residual, rank.min(m.min(n)))?
                    }
                    _ => exact_residual,
                };
                let rank = numerical_rank(&residual, DEFAULT_RANK_TOL)?;
                let (received, factors) = transmit(residual.clone(), factored);
                for c in clients.iter_mut() {
                    let layer = &mut c.model.layers_mut()[l];
                    layer.merge_residual(&received)?;
                    layer.adapter_mut().set_factors(a_avg.clone(), b_avg.clone())?;
                }
                LayerAggregate {
                    a_global: a_avg,
                    b_global: b_avg,
                    residual,
                    residual_factors: factors,
                    merged_rank: rank,
                    comm: comm_cost(&strategy, k, m, n, r, rank),
                }
            }
            AggregationStrategy::FedExLora(Assignment::Reinitialize) => {
                let a_fresh = gaussian_a(r, n, seed::derive(server.seed, &[seed::REINIT, next_round as u64, l as u64]));
                let b_zero = Matrix::zeros(m, r);
                let rank = numerical_rank(&mean_product, DEFAULT_RANK_TOL)?;
                let (received, factors) = transmit(mean_product.clone(), factored);
                for c in clients.iter_mut() {
                    let layer = &mut c.model.layers_mut()[l];
                    layer.merge_residual(&received)?;
                    layer.adapter_mut().set_factors(a_fresh.clone(), b_zero.clone())?;
                }
                LayerAggregate {
                    a_global: a_fresh,
                    b_global: b_zero,
                    residual: mean_product,
                    residual_factors: factors,
                    merged_rank: rank,
                    comm: comm_cost(&strategy, k, m, n, r, rank),
                }
            }
            AggregationStrategy::FedExLora(Assignment::KeepLocal) => {
                let mut merged_rank = 0;
                for c in clients.iter_mut() {
                    let layer = &mut c.model.layers_mut()[l];
                    let s = layer.adapter().scaling();
                    // Unique offset making W0_i + s·B_i·A_i equal to the average.
                    let offset = ideal.sub(&layer.effective_weight())?.scale(1.0 / s);
                    merged_rank = merged_rank.max(numerical_rank(&offset, DEFAULT_RANK_TOL)?);
                    let (received, _) = transmit(offset, factored);
                    layer.merge_residual(&received)?;
                }
                LayerAggregate {
                    a_global: a_avg,
                    b_global: b_avg,
                    residual: exact_residual,
                    residual_factors: None,
                    merged_rank,
                    comm: comm_cost(&strategy, k, m, n, r, merged_rank),
                }
            }
        };
        reference.push(ideal);
        layers.push(agg);
    }

    server.reference_dense = reference;
    server.round = next_round;
    let comm = CommLedger::sum(layers.iter().map(|l| &l.comm), next_round);
    Ok(AggregationResult { layers, comm })
}

/// Per layer, the largest Frobenius distance between a client's effective
/// weight and the dense reference from the last aggregation.
pub fn exactness_gap(server: &ServerState, clients: &[ClientState]) -> Result<Vec<f64>> {
    check_clients(clients)?;
    if server.reference_dense.len() != clients[0].model.depth() {
        return Err(Error::contract("exactness_gap called before any aggregation"));
    }
    server
        .reference_dense
        .iter()
        .enumerate()
        .map(|(l, ideal)| {
            clients.iter().try_fold(0.0f64, |acc, c| {
                let gap = layer_of(c, l).effective_weight().sub(ideal)?.frobenius_norm();
                Ok(acc.max(gap))
            })
        })
        .collect()
}

/// One synchronous round: local training on every client, divergence of the
/// raw adapters, aggregation, then post-aggregation metrics.
pub fn run_round(server: &mut ServerState, clients: &mut [ClientState]) -> Result<RoundReport> {
    check_clients(clients)?;
    let round = server.round + 1;
    let freeze_a = server.strategy.freezes_a();

    let outcomes: Vec<Result<Vec<f64>>> = clients
        .par_iter_mut()
        .map(|c| {
            let mut cfg = c.cfg.clone();
            cfg.seed = seed::derive(c.cfg.seed, &[round as u64]);
            cfg.freeze_a |= freeze_a;
            local_train(&mut c.model, &c.data, &cfg)
        })
        .collect();
    for outcome in outcomes {
        outcome?;
    }

    let depth = clients[0].model.depth();
    let divergence = (0..depth)
        .map(|l| divergence_norm(clients, l))
        .collect::<Result<Vec<_>>>()?;

    let result = aggregate(server, clients)?;
    let gap = exactness_gap(server, clients)?;
    let losses = clients
        .iter()
        .map(|c| c.model.loss(&c.data))
        .collect::<Result<Vec<_>>>()?;
    let mean_client_loss = losses.iter().sum::<f64>() / losses.len() as f64;

    Ok(RoundReport {
        round,
        strategy: server.strategy.to_string(),
        divergence,
        exactness_gap: gap,
        mean_client_loss,
        residual_rank: result.layers.iter().map(|l| l.merged_rank).collect(),
        layer_comm: result.layers.iter().map(|l| l.comm.clone()).collect(),
        comm: result.comm,
    })
}

/// Builds `k` identical clients on top of a task's pretrained weights.
pub fn build_clients(
    pretrained: &[Matrix],
    datasets: Vec<Dataset>,
    rank: usize,
    alpha: f64,
    train: &TrainConfig,
    seed: u64,
) -> Result<Vec<ClientState>> {
    let model = ToyModel::from_pretrained(pretrained, rank, alpha, seed)?;
    Ok(datasets
        .into_iter()
        .enumerate()
        .map(|(id, data)| ClientState {
            id,
            model: model.clone(),
            data,
            cfg: TrainConfig {
                seed: seed::derive(train.seed, &[id as u64]),
                ..train.clone()
            },
        })
        .collect())
}
