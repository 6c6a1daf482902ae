//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use common::*;
use fedlora_core::harness::{AssignmentName, StrategyName};
use fedlora_core::linalg::{best_rank_approx, numerical_rank, DEFAULT_RANK_TOL};
use fedlora_core::{
    build_federation, comm_cost, run_experiment, simulate, AggregationStrategy, Assignment, ExperimentConfig,
    LoraAdapter, LoraLayer, Matrix,
};

type Check = fn() -> Outcome;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// The 20-run sweep over clients, rank and heterogeneity shared by the
/// exactness, inexactness and rank-cap criteria. `alpha = 2r` keeps the
/// adapter scale at the default's `s = 2` for every rank.
fn sweep(strategy: StrategyName, seed_offset: u64) -> Vec<ExperimentConfig> {
    const CLIENTS: [usize; 3] = [2, 3, 5];
    const RANKS: [usize; 3] = [1, 2, 4];
    const HETEROGENEITY: [f64; 3] = [0.0, 0.5, 1.0];
    (0..20)
        .map(|i| ExperimentConfig {
            strategy,
            clients: CLIENTS[i % 3],
            rank: RANKS[(i / 3) % 3],
            alpha: 2.0 * RANKS[(i / 3) % 3] as f64,
            heterogeneity: HETEROGENEITY[(i / 9) % 3],
            m: 32,
            n: 32,
            depth: 2,
            seed: seed_offset + i as u64,
            ..ExperimentConfig::default()
        })
        .collect()
}

fn exactness() -> Outcome {
    let start = Instant::now();
    let (mut worst, mut worst_reported, mut checks) = (0.0f64, 0.0f64, 0usize);
    for cfg in sweep(StrategyName::FedexLora, 0) {
        let (mut server, mut clients) = build_federation(&cfg).unwrap();
        for _ in 0..cfg.rounds {
            let t = traced_round(&mut server, &mut clients);
            for (l, gap) in t.relative_gap.iter().enumerate() {
                worst = worst.max(*gap);
                worst_reported = worst_reported.max(t.reported_gap[l] / fro(&t.ideal[l]));
                checks += 1;
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-9 && worst_reported <= 1e-9 && elapsed < 60.0,
        format!(
            "max relative gap {worst:.2e} (reported {worst_reported:.2e}) over {checks} layer-rounds, {elapsed:.1}s"
        ),
    )
}

fn fedit_inexact() -> Outcome {
    let configs: Vec<ExperimentConfig> = sweep(StrategyName::Fedit, 1000)
        .into_iter()
        .map(|c| ExperimentConfig {
            heterogeneity: c.heterogeneity.max(0.5),
            local_epochs: 3,
            ..c
        })
        .collect();
    let mut hits = 0;
    let mut smallest = f64::INFINITY;
    for cfg in &configs {
        let (mut server, mut clients) = build_federation(cfg).unwrap();
        let t = traced_round(&mut server, &mut clients);
        let gap = t.relative_gap.iter().copied().fold(0.0, f64::max);
        smallest = smallest.min(gap);
        if gap > 1e-4 {
            hits += 1;
        }
    }
    outcome(
        hits >= 19,
        format!("round-1 gap > 1e-4 in {hits}/20 seeds, smallest {smallest:.2e}"),
    )
}

fn rank_cap() -> Outcome {
    let (mut within, mut total, mut worst_tail) = (0usize, 0usize, 0.0f64);
    for cfg in sweep(StrategyName::FedexLora, 2000) {
        let bound = cfg.clients * cfg.rank;
        let (mut server, mut clients) = build_federation(&cfg).unwrap();
        for _ in 0..cfg.rounds {
            let t = traced_round(&mut server, &mut clients);
            for layer in &t.result.layers {
                total += 1;
                if numerical_rank(&layer.residual, DEFAULT_RANK_TOL).unwrap() <= bound {
                    within += 1;
                }
                if bound < cfg.m.min(cfg.n) {
                    let sigma = singular_values(&dense(&layer.residual));
                    if sigma[0] > 0.0 {
                        worst_tail = worst_tail.max(sigma[bound] / sigma[0]);
                    }
                }
            }
        }
    }
    outcome(
        within == total && worst_tail <= 1e-9,
        format!("rank <= k*r in {within}/{total} layer-rounds, max sigma_(kr+1)/sigma_1 {worst_tail:.2e}"),
    )
}

fn eckart_young() -> Outcome {
    let (k, r, m, n) = (3, 4, 32, 32);
    let (mut worst_err, mut beaten) = (0.0f64, 0usize);
    for seed in 0..100u64 {
        let mut g = rng(10_000 + seed);
        let bs: Vec<Dense> = (0..k).map(|_| gaussian(m, r, 1.0, &mut g)).collect();
        let as_: Vec<Dense> = (0..k).map(|_| gaussian(r, n, 1.0, &mut g)).collect();
        let mut mean_prod = vec![vec![0.0; n]; m];
        let mut b_bar = vec![vec![0.0; r]; m];
        let mut a_bar = vec![vec![0.0; n]; r];
        for i in 0..k {
            mean_prod = axpy(&mean_prod, 1.0 / k as f64, &mul(&bs[i], &as_[i]));
            b_bar = axpy(&b_bar, 1.0 / k as f64, &bs[i]);
            a_bar = axpy(&a_bar, 1.0 / k as f64, &as_[i]);
        }
        let residual = axpy(&mean_prod, -1.0, &mul(&b_bar, &a_bar));
        let target = 1 + (seed as usize % (k * r));

        let approx = dense(&best_rank_approx(&from_dense(&residual), target).unwrap());
        let err = fro_diff(&residual, &approx);
        let sigma = singular_values(&residual);
        let expected = sigma[target..].iter().map(|s| s * s).sum::<f64>().sqrt();
        worst_err = worst_err.max((err - expected).abs());

        for _ in 0..20 {
            let q = random_orthonormal(m, target, &mut g);
            let projected = mul(&q, &mul(&transpose(&q), &residual));
            if fro_diff(&residual, &projected) < err {
                beaten += 1;
            }
        }
    }
    outcome(
        worst_err <= 1e-8 && beaten == 0,
        format!("max |error - tail| {worst_err:.2e}, random projections beating truncation {beaten}/2000"),
    )
}

fn base_trend_config() -> ExperimentConfig {
    ExperimentConfig {
        strategy: StrategyName::Fedit,
        heterogeneity: 0.5,
        ..ExperimentConfig::default()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn round_one_divergence(local_epochs: usize, seed: u64) -> f64 {
    let cfg = ExperimentConfig {
        local_epochs,
        rounds: 1,
        seed,
        ..base_trend_config()
    };
    mean(&simulate(&cfg).unwrap().reports[0].divergence)
}

fn divergence_vs_epochs() -> Outcome {
    let d3 = median((0..10).map(|s| round_one_divergence(3, s)).collect());
    let d10 = median((0..10).map(|s| round_one_divergence(10, s)).collect());
    outcome(d10 > d3, format!("median round-1 divergence: 3 epochs {d3:.3e}, 10 epochs {d10:.3e}"))
}

fn divergence_vs_rounds() -> Outcome {
    let mut decreasing = 0;
    let mut ratios = Vec::new();
    for seed in 0..10 {
        let cfg = ExperimentConfig {
            rounds: 15,
            seed,
            ..base_trend_config()
        };
        let reports = simulate(&cfg).unwrap().reports;
        let (first, last) = (mean(&reports[0].divergence), mean(&reports[14].divergence));
        ratios.push(last / first);
        if last < first {
            decreasing += 1;
        }
    }
    outcome(
        decreasing >= 8,
        format!("round 15 below round 1 in {decreasing}/10 seeds, median ratio {:.3}", median(ratios)),
    )
}

fn final_loss(strategy: StrategyName, assignment: AssignmentName, seed: u64) -> f64 {
    let cfg = ExperimentConfig {
        strategy,
        assignment,
        heterogeneity: 0.5,
        seed,
        ..ExperimentConfig::default()
    };
    let sim = simulate(&cfg).unwrap();
    assert!(sim.failure.is_none(), "{strategy} seed {seed} failed");
    sim.reports.last().unwrap().mean_client_loss
}

fn strategy_ordering() -> Outcome {
    let med = |s, a| median((0..10).map(|seed| final_loss(s, a, seed)).collect());
    let fedex = med(StrategyName::FedexLora, AssignmentName::Average);
    let fedit = med(StrategyName::Fedit, AssignmentName::Average);
    let ffa = med(StrategyName::FfaLora, AssignmentName::Average);
    let reinit = med(StrategyName::FedexLora, AssignmentName::Reinit);
    outcome(
        fedex <= fedit && fedex <= ffa && fedex <= reinit,
        format!(
            "median final loss: fedex-lora {fedex:.4e}, fedit {fedit:.4e}, ffa-lora {ffa:.4e}, fedex-lora[reinit] {reinit:.4e}"
        ),
    )
}

fn communication() -> Outcome {
    // Counted by hand for m = n = 4, r = 1, k = 2: an adapter pair is
    // 4 + 4 = 8 scalars, B alone is 4, the dense weight 16. A rank-2
    // residual costs 2 * (4 + 4) = 16 factored and 16 dense.
    let hand = [
        (AggregationStrategy::FedIt, 2 * 8, 2 * 8),
        (AggregationStrategy::FfaLora, 2 * 4, 2 * 4),
        (AggregationStrategy::FedExLora(Assignment::Average), 2 * 8, 2 * (8 + 16)),
        (AggregationStrategy::DenseOracle, 2 * 16, 2 * 16),
    ];
    let hand_ok = hand.iter().all(|(s, up, down)| {
        let c = comm_cost(s, 2, 4, 4, 1, 2);
        c.uplink_params == *up && c.downlink_params == *down
    });

    let d = ExperimentConfig::default();
    let measured = |strategy| {
        let cfg = ExperimentConfig {
            strategy,
            rounds: 2,
            ..d.clone()
        };
        let reports = simulate(&cfg).unwrap().reports;
        reports.iter().map(|r| r.comm.total()).max().unwrap()
    };
    let ffa = measured(StrategyName::FfaLora);
    let fedit = measured(StrategyName::Fedit);
    let fedex = measured(StrategyName::FedexLora);
    let dense_ft = measured(StrategyName::DenseOracle);
    // Worst case for FedEx-LoRA: a residual of full rank k * r.
    let fedex_worst = (0..d.depth)
        .map(|_| {
            comm_cost(
                &AggregationStrategy::FedExLora(Assignment::Average),
                d.clients,
                d.m,
                d.n,
                d.rank,
                d.clients * d.rank,
            )
            .total()
        })
        .sum::<u64>();
    outcome(
        hand_ok && ffa <= fedit && fedit <= fedex && fedex <= fedex_worst && fedex_worst < dense_ft,
        format!(
            "hand count {}; per round ffa-lora {ffa} <= fedit {fedit} <= fedex-lora {fedex} (worst {fedex_worst}) < dense {dense_ft}",
            if hand_ok { "matches" } else { "differs" }
        ),
    )
}

fn gradient_check() -> Outcome {
    const H: f64 = 1e-5;
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut g = rng(20_000 + seed);
        let depth = 1 + (seed as usize % 3);
        let dims: Vec<usize> = (0..=depth).map(|i| 2 + ((seed as usize + 3 * i) % 5)).collect();
        let r = 1 + (seed as usize % 2);
        let alpha = [1.0, 2.0, 4.0][seed as usize % 3];
        let model = random_model(&dims, r, alpha, &mut g);
        let batch = random_dataset(4 + (seed as usize % 5), dims[0], dims[depth], &mut g);
        let (grads, _) = model.grads(&batch).unwrap();

        let inputs = dense(batch.inputs());
        let targets = dense(batch.targets());
        let loss_with = |layers: &[LoraLayer]| {
            let ws: Vec<Dense> = layers.iter().map(effective).collect();
            mse(&ws, &inputs, &targets)
        };
        for l in 0..depth {
            for which in 0..2 {
                let base = model.layers()[l].adapter();
                let factor = if which == 0 { base.a() } else { base.b() };
                let analytic = if which == 0 { &grads[l].da } else { &grads[l].db };
                for idx in 0..factor.data().len() {
                    let bump = |delta: f64| {
                        let mut layers = model.layers().to_vec();
                        let ad = layers[l].adapter();
                        let (mut a, mut b) = (ad.a().clone(), ad.b().clone());
                        let target: &mut Matrix = if which == 0 { &mut a } else { &mut b };
                        target.data_mut()[idx] += delta;
                        let w0 = layers[l].w0().clone();
                        layers[l] = LoraLayer::new(w0, LoraAdapter::new(a, b, ad.alpha()).unwrap()).unwrap();
                        loss_with(&layers)
                    };
                    let fd = (bump(H) - bump(-H)) / (2.0 * H);
                    worst = worst.max((fd - analytic.data()[idx]).abs());
                }
            }
        }
    }
    outcome(worst <= 1e-6, format!("max |analytic - central difference| {worst:.2e} over 50 cases"))
}

fn read_artifacts(dir: &Path) -> Vec<Vec<u8>> {
    ["config_echo.json", "rounds.csv", "summary.json"]
        .iter()
        .map(|f| std::fs::read(dir.join(f)).unwrap())
        .collect()
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        rounds: 4,
        seed: 7,
        out_dir: dir.path().join("run"),
        ..ExperimentConfig::default()
    };
    run_experiment(&cfg).unwrap();
    let first = read_artifacts(&cfg.out_dir);
    run_experiment(&cfg).unwrap();
    let second = read_artifacts(&cfg.out_dir);
    let bytes: usize = first.iter().map(Vec::len).sum();
    outcome(
        first == second,
        format!("3 artifacts, {bytes} bytes, {}", if first == second { "identical" } else { "differ" }),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, Check); 10] = [
        ("exactness of fedex-lora vs dense oracle", exactness),
        ("inexactness of fedit", fedit_inexact),
        ("residual rank cap", rank_cap),
        ("eckart-young optimality of truncation", eckart_young),
        ("divergence grows with local epochs", divergence_vs_epochs),
        ("divergence shrinks over rounds", divergence_vs_rounds),
        ("strategy ordering by final loss", strategy_ordering),
        ("communication ordering", communication),
        ("gradient correctness", gradient_check),
        ("determinism of artifacts", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {:>2} {:<40} {}  {}",
            i + 1,
            name,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
