//! Round metrics: divergence of averaged adapters from the ideal update,
//! communication ledger, and the CSV / JSON artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::federation::{layer_residual, AggregationStrategy, ClientState};

pub const CSV_HEADER: &str = "round,strategy,layer,divergence,residual_rank,uplink_params,downlink_params,mean_loss";
pub const ROUNDS_CSV: &str = "rounds.csv";
pub const SUMMARY_JSON: &str = "summary.json";

/// Scalars moved in one round. Counts add up across layers.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CommLedger {
    pub round: usize,
    /// Client → server, summed over clients.
    pub uplink_params: u64,
    /// Server → client, summed over clients.
    pub downlink_params: u64,
}

impl CommLedger {
    pub fn total(&self) -> u64 {
        self.uplink_params + self.downlink_params
    }

    pub fn sum<'a>(items: impl IntoIterator<Item = &'a CommLedger>, round: usize) -> CommLedger {
        items.into_iter().fold(
            CommLedger {
                round,
                ..CommLedger::default()
            },
            |acc, c| CommLedger {
                round,
                uplink_params: acc.uplink_params + c.uplink_params,
                downlink_params: acc.downlink_params + c.downlink_params,
            },
        )
    }
}

/// Whether the server ships the residual as `q · r` factors. Factoring wins
/// iff `bound · (m + n) < m · n`, where `bound` is the worst-case residual
/// rank (`k · r`, or `r'` under truncation).
pub fn residual_is_factored(strategy: &AggregationStrategy, k: usize, m: usize, n: usize, r: usize) -> bool {
    let bound = match strategy {
        AggregationStrategy::FedExLora(_) => k * r,
        AggregationStrategy::FedExTruncated { rank } => *rank,
        _ => return false,
    };
    bound * (m + n) < m * n
}

/// Closed-form per-round counts for one `m × n` layer with `k` clients at
/// rank `r`. `residual_rank` is the numerical rank of the merged residual;
/// truncation always ships `r'` columns instead.
pub fn comm_cost(
    strategy: &AggregationStrategy,
    k: usize,
    m: usize,
    n: usize,
    r: usize,
    residual_rank: usize,
) -> CommLedger {
    let (k, m_, n_, r_) = (k as u64, m as u64, n as u64, r as u64);
    let adapters = m_ * r_ + r_ * n_;
    let dense = m_ * n_;
    let residual_term = |rho: u64| {
        if residual_is_factored(strategy, k as usize, m, n, r) {
            rho * (m_ + n_)
        } else {
            dense
        }
    };
    let (up, down_per_client) = match strategy {
        AggregationStrategy::DenseOracle => (dense, dense),
        AggregationStrategy::FedIt => (adapters, adapters),
        AggregationStrategy::FfaLora => (m_ * r_, m_ * r_),
        AggregationStrategy::FedExLora(_) if residual_rank == 0 => (adapters, adapters),
        AggregationStrategy::FedExLora(_) => (adapters, adapters + residual_term(residual_rank as u64)),
        AggregationStrategy::FedExTruncated { rank } => (adapters, adapters + residual_term(*rank as u64)),
    };
    CommLedger {
        round: 0,
        uplink_params: k * up,
        downlink_params: k * down_per_client,
    }
}

/// Scaled Frobenius norm of `mean(B_i A_i) - mean(B_i) mean(A_i)` for one
/// layer: `s · ‖·‖_F / sqrt(m · n)`. Measures the raw client adapters,
/// whatever strategy will aggregate them.
pub fn divergence_norm(clients: &[ClientState], layer: usize) -> Result<f64> {
    let first = clients
        .first()
        .ok_or_else(|| Error::contract("divergence of an empty client set"))?;
    let l = first
        .model
        .layers()
        .get(layer)
        .ok_or_else(|| Error::contract(format!("layer {layer} out of range")))?;
    let (m, n) = l.shape();
    let s = l.adapter().scaling();
    let residual = layer_residual(clients, layer)?;
    Ok(s * residual.frobenius_norm() / ((m * n) as f64).sqrt())
}

/// Metrics for one aggregation round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    /// 1-based.
    pub round: usize,
    pub strategy: String,
    /// Per layer, [`divergence_norm`] of the pre-aggregation adapters.
    pub divergence: Vec<f64>,
    /// Per layer, distance of the post-aggregation weights from the dense average.
    pub exactness_gap: Vec<f64>,
    /// Post-aggregation loss, averaged over clients.
    pub mean_client_loss: f64,
    /// Per layer numerical rank of what was merged into `W0`.
    pub residual_rank: Vec<usize>,
    pub layer_comm: Vec<CommLedger>,
    pub comm: CommLedger,
}

/// JSON run summary. Field order is the serialization order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub strategy: String,
    pub rounds: usize,
    pub final_mean_loss: Option<f64>,
    pub max_exactness_gap: f64,
    pub total_uplink_params: u64,
    pub total_downlink_params: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failed_at_round: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn summarize(strategy: &str, reports: &[RoundReport]) -> Summary {
    Summary {
        strategy: strategy.to_string(),
        rounds: reports.len(),
        final_mean_loss: reports.last().map(|r| r.mean_client_loss),
        max_exactness_gap: reports
            .iter()
            .flat_map(|r| r.exactness_gap.iter().copied())
            .fold(0.0, f64::max),
        total_uplink_params: reports.iter().map(|r| r.comm.uplink_params).sum(),
        total_downlink_params: reports.iter().map(|r| r.comm.downlink_params).sum(),
        failed_at_round: None,
        error: None,
    }
}

/// One row per (round, layer). `prefix`, when given, becomes a leading column.
pub(crate) fn csv_rows(out: &mut String, reports: &[RoundReport], prefix: Option<&str>) {
    for rep in reports {
        for (l, comm) in rep.layer_comm.iter().enumerate() {
            if let Some(p) = prefix {
                let _ = write!(out, "{p},");
            }
            let _ = writeln!(
                out,
                "{},{},{},{:e},{},{},{},{:e}",
                rep.round,
                rep.strategy,
                l,
                rep.divergence[l],
                rep.residual_rank[l],
                comm.uplink_params,
                comm.downlink_params,
                rep.mean_client_loss
            );
        }
    }
}

pub fn reports_to_csv(reports: &[RoundReport]) -> String {
    let mut out = String::with_capacity(64 * (reports.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    csv_rows(&mut out, reports, None);
    out
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    write_file(path, &text)
}

/// Writes `rounds.csv` and `summary.json` into `dir` (created if missing).
/// Returns the two paths.
pub fn emit_reports(reports: &[RoundReport], dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let strategy = reports
        .first()
        .map(|r| r.strategy.clone())
        .ok_or_else(|| Error::contract("no round reports to emit"))?;
    emit_with_summary(reports, dir, &summarize(&strategy, reports))
}

pub(crate) fn emit_with_summary(reports: &[RoundReport], dir: &Path, summary: &Summary) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join(ROUNDS_CSV);
    let json = dir.join(SUMMARY_JSON);
    write_file(&csv, &reports_to_csv(reports))?;
    write_json(&json, summary)?;
    Ok((csv, json))
}
