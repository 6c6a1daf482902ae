//! Federated LoRA aggregation, exact and inexact, on a desk-scale simulator.
//!
//! Clients fine-tune low-rank adapters `(A, B)` on top of a frozen base
//! weight `W0`. The server can average the adapters independently (FedIT),
//! freeze `A` and average only `B` (FFA-LoRA), or average the adapters and
//! fold the residual `mean(B_i A_i) - mean(B_i) mean(A_i)` into `W0` so that
//! every client ends up with exactly the averaged effective weight
//! (FedEx-LoRA). A dense oracle that averages full effective weights serves
//! as ground truth for all of them.

pub mod error;
pub mod federation;
pub mod harness;
pub mod linalg;
pub mod lora;
pub mod metrics;
pub mod seed;
pub mod task;

pub use error::{Error, Result};
pub use federation::{
    aggregate, average_adapters, compute_residual, exactness_gap, run_round, AggregationResult,
    AggregationStrategy, Assignment, ClientState, LayerAggregate, ServerState,
};
pub use harness::{
    build_federation, compare, parse_config, run_experiment, simulate, ConfigOverrides, ExperimentConfig,
};
pub use linalg::{Matrix, QrFactors, SvdFactors};
pub use lora::{init_adapter, LoraAdapter, LoraLayer};
pub use metrics::{comm_cost, divergence_norm, emit_reports, CommLedger, RoundReport};
pub use task::{make_task, Dataset, Task, TaskSpec, ToyModel, TrainConfig};
