//! Experiment configuration, orchestration and reproducible artifacts.
//!
//! Settings resolve in this order, later wins: built-in defaults, the
//! `FEDLORA_SEED` environment variable (seed only), the JSON config file,
//! explicit overrides (command-line flags).

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{build_clients, run_round, AggregationStrategy, Assignment, ClientState, ServerState};
use crate::seed;
use crate::metrics::{self, csv_rows, emit_with_summary, summarize, RoundReport, Summary, CSV_HEADER};
use crate::task::{make_task, TaskSpec, TrainConfig};

pub const SEED_ENV: &str = "FEDLORA_SEED";
pub const CONFIG_ECHO_JSON: &str = "config_echo.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyName {
    DenseOracle,
    Fedit,
    FfaLora,
    FedexLora,
    FedexTrunc,
}

impl StrategyName {
    pub const ALL: [StrategyName; 5] = [
        StrategyName::DenseOracle,
        StrategyName::Fedit,
        StrategyName::FfaLora,
        StrategyName::FedexLora,
        StrategyName::FedexTrunc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyName::DenseOracle => "dense-oracle",
            StrategyName::Fedit => "fedit",
            StrategyName::FfaLora => "ffa-lora",
            StrategyName::FedexLora => "fedex-lora",
            StrategyName::FedexTrunc => "fedex-trunc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AssignmentName {
    Average,
    Reinit,
    KeepLocal,
}

impl AssignmentName {
    pub const ALL: [AssignmentName; 3] = [AssignmentName::Average, AssignmentName::Reinit, AssignmentName::KeepLocal];

    pub fn as_str(self) -> &'static str {
        match self {
            AssignmentName::Average => "average",
            AssignmentName::Reinit => "reinit",
            AssignmentName::KeepLocal => "keep-local",
        }
    }
}

macro_rules! name_enum_traits {
    ($ty:ty, $what:literal) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                <$ty>::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| {
                    let options: Vec<&str> = <$ty>::ALL.iter().map(|v| v.as_str()).collect();
                    format!("unknown {} `{s}`, expected one of {}", $what, options.join("|"))
                })
            }
        }
    };
}

name_enum_traits!(StrategyName, "strategy");
name_enum_traits!(AssignmentName, "assignment");

/// Every knob of one experiment. Serialized as-is into `config_echo.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub strategy: StrategyName,
    pub clients: usize,
    pub rank: usize,
    pub alpha: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub m: usize,
    pub n: usize,
    pub depth: usize,
    pub samples_per_client: usize,
    pub heterogeneity: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub truncation_rank: Option<usize>,
    pub assignment: AssignmentName,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            strategy: StrategyName::FedexLora,
            clients: 3,
            rank: 4,
            alpha: 8.0,
            rounds: 15,
            local_epochs: 3,
            m: 32,
            n: 32,
            depth: 2,
            samples_per_client: 256,
            heterogeneity: 0.5,
            learning_rate: 0.95,
            batch_size: 32,
            seed: 0,
            truncation_rank: None,
            assignment: AssignmentName::Average,
            out_dir: PathBuf::from("fedlora-out"),
        }
    }
}

/// Optional settings layered on top of the defaults. Used both for config
/// files and for command-line flags.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigOverrides {
    pub strategy: Option<StrategyName>,
    pub clients: Option<usize>,
    pub rank: Option<usize>,
    pub alpha: Option<f64>,
    pub rounds: Option<usize>,
    pub local_epochs: Option<usize>,
    pub m: Option<usize>,
    pub n: Option<usize>,
    pub depth: Option<usize>,
    pub samples_per_client: Option<usize>,
    pub heterogeneity: Option<f64>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub truncation_rank: Option<usize>,
    pub assignment: Option<AssignmentName>,
    pub out_dir: Option<PathBuf>,
}

fn field<T: DeserializeOwned>(key: &str, value: serde_json::Value) -> Result<Option<T>> {
    if value.is_null() {
        return Ok(None);
    }
    serde_json::from_value(value)
        .map(Some)
        .map_err(|e| Error::config(key, e.to_string()))
}

fn named<T: FromStr<Err = String>>(key: &str, value: serde_json::Value) -> Result<Option<T>> {
    match value {
        serde_json::Value::Null => Ok(None),
        serde_json::Value::String(s) => s.parse().map(Some).map_err(|e| Error::config(key, e)),
        other => Err(Error::config(key, format!("expected a string, got {other}"))),
    }
}

impl ConfigOverrides {
    /// Parses a JSON object. Unknown keys and ill-typed values are errors
    /// naming the key.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::config("<file>", e.to_string()))?;
        let serde_json::Value::Object(map) = value else {
            return Err(Error::config("<file>", "config must be a JSON object"));
        };
        let mut o = ConfigOverrides::default();
        for (key, v) in map {
            match key.as_str() {
                "strategy" => o.strategy = named(&key, v)?,
                "clients" => o.clients = field(&key, v)?,
                "rank" => o.rank = field(&key, v)?,
                "alpha" => o.alpha = field(&key, v)?,
                "rounds" => o.rounds = field(&key, v)?,
                "local_epochs" => o.local_epochs = field(&key, v)?,
                "m" => o.m = field(&key, v)?,
                "n" => o.n = field(&key, v)?,
                "depth" => o.depth = field(&key, v)?,
                "samples_per_client" => o.samples_per_client = field(&key, v)?,
                "heterogeneity" => o.heterogeneity = field(&key, v)?,
                "learning_rate" => o.learning_rate = field(&key, v)?,
                "batch_size" => o.batch_size = field(&key, v)?,
                "seed" => o.seed = field(&key, v)?,
                "truncation_rank" => o.truncation_rank = field(&key, v)?,
                "assignment" => o.assignment = named(&key, v)?,
                "out_dir" => o.out_dir = field(&key, v)?,
                _ => return Err(Error::config(key, "unknown key")),
            }
        }
        Ok(o)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Config { key, message } => Error::Config {
                key,
                message: format!("{message} (in {})", path.display()),
            },
            other => other,
        })
    }

    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        macro_rules! take {
            ($($f:ident),*) => {$(
                if let Some(v) = &self.$f {
                    cfg.$f = v.clone();
                }
            )*};
        }
        take!(
            strategy,
            clients,
            rank,
            alpha,
            rounds,
            local_epochs,
            m,
            n,
            depth,
            samples_per_client,
            heterogeneity,
            learning_rate,
            batch_size,
            seed,
            assignment,
            out_dir
        );
        if self.truncation_rank.is_some() {
            cfg.truncation_rank = self.truncation_rank;
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("clients", self.clients),
            ("rank", self.rank),
            ("rounds", self.rounds),
            ("local_epochs", self.local_epochs),
            ("m", self.m),
            ("n", self.n),
            ("depth", self.depth),
            ("samples_per_client", self.samples_per_client),
            ("batch_size", self.batch_size),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if self.rank > self.m.min(self.n) {
            return Err(Error::config(
                "rank",
                format!("{} exceeds min(m, n) = {}", self.rank, self.m.min(self.n)),
            ));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", "must be a positive number"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be a positive number"));
        }
        if !(0.0..=1.0).contains(&self.heterogeneity) {
            return Err(Error::config("heterogeneity", "must lie in [0, 1]"));
        }
        if self.batch_size > self.samples_per_client {
            return Err(Error::config(
                "batch_size",
                format!("{} exceeds samples_per_client = {}", self.batch_size, self.samples_per_client),
            ));
        }
        match (self.strategy, self.truncation_rank) {
            (StrategyName::FedexTrunc, None) => {
                return Err(Error::config("truncation_rank", "required when strategy is fedex-trunc"));
            }
            (StrategyName::FedexTrunc, Some(p)) => {
                let cap = (self.clients * self.rank).min(self.m.min(self.n));
                if p == 0 || p > cap {
                    return Err(Error::config(
                        "truncation_rank",
                        format!("{p} must lie in 1..={cap} (clients * rank, capped by min(m, n))"),
                    ));
                }
            }
            (_, Some(_)) => {
                return Err(Error::config("truncation_rank", "only valid with strategy fedex-trunc"));
            }
            (_, None) => {}
        }
        if self.assignment != AssignmentName::Average && self.strategy != StrategyName::FedexLora {
            return Err(Error::config("assignment", "only valid with strategy fedex-lora"));
        }
        Ok(())
    }

    pub fn aggregation_strategy(&self) -> AggregationStrategy {
        match self.strategy {
            StrategyName::DenseOracle => AggregationStrategy::DenseOracle,
            StrategyName::Fedit => AggregationStrategy::FedIt,
            StrategyName::FfaLora => AggregationStrategy::FfaLora,
            StrategyName::FedexLora => AggregationStrategy::FedExLora(match self.assignment {
                AssignmentName::Average => Assignment::Average,
                AssignmentName::Reinit => Assignment::Reinitialize,
                AssignmentName::KeepLocal => Assignment::KeepLocal,
            }),
            StrategyName::FedexTrunc => AggregationStrategy::FedExTruncated {
                rank: self.truncation_rank.unwrap_or(0),
            },
        }
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            m: self.m,
            n: self.n,
            depth: self.depth,
            clients: self.clients,
            samples_per_client: self.samples_per_client,
            heterogeneity: self.heterogeneity,
            seed: self.seed,
        }
    }
}

/// Resolves defaults, `env_seed`, the optional file and `flags`, then validates.
pub fn parse_config_with_env(
    file: Option<&Path>,
    flags: &ConfigOverrides,
    env_seed: Option<&str>,
) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(raw) = env_seed {
        cfg.seed = raw
            .trim()
            .parse()
            .map_err(|_| Error::config(SEED_ENV, format!("`{raw}` is not an unsigned integer")))?;
    }
    if let Some(path) = file {
        ConfigOverrides::from_file(path)?.apply(&mut cfg);
    }
    flags.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

/// [`parse_config_with_env`] reading `FEDLORA_SEED` from the process environment.
pub fn parse_config(file: Option<&Path>, flags: &ConfigOverrides) -> Result<ExperimentConfig> {
    let env = std::env::var(SEED_ENV).ok();
    parse_config_with_env(file, flags, env.as_deref())
}

/// Round reports of a finished or aborted simulation.
#[derive(Debug)]
pub struct Simulation {
    pub reports: Vec<RoundReport>,
    /// Round that failed and why.
    pub failure: Option<(usize, Error)>,
}

/// Builds the task, the clients and the server for `cfg`, before any round.
pub fn build_federation(cfg: &ExperimentConfig) -> Result<(ServerState, Vec<ClientState>)> {
    cfg.validate()?;
    let task = make_task(&cfg.task_spec())?;
    let train = TrainConfig {
        learning_rate: cfg.learning_rate,
        local_epochs: cfg.local_epochs,
        batch_size: cfg.batch_size,
        seed: seed::derive(cfg.seed, &[seed::TRAIN]),
        freeze_a: false,
    };
    let clients = build_clients(
        &task.pretrained,
        task.datasets,
        cfg.rank,
        cfg.alpha,
        &train,
        seed::derive(cfg.seed, &[seed::ADAPTER]),
    )?;
    let server = ServerState::new(cfg.aggregation_strategy(), seed::derive(cfg.seed, &[seed::SERVER]));
    Ok((server, clients))
}

/// Runs the whole federation in memory.
pub fn simulate(cfg: &ExperimentConfig) -> Result<Simulation> {
    let (mut server, mut clients) = build_federation(cfg)?;
    let mut reports = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        match run_round(&mut server, &mut clients) {
            Ok(rep) => reports.push(rep),
            Err(e) => {
                return Ok(Simulation {
                    reports,
                    failure: Some((round, e)),
                })
            }
        }
    }
    Ok(Simulation { reports, failure: None })
}

/// Artifacts of a completed run.
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub reports: Vec<RoundReport>,
    pub summary: Summary,
    pub out_dir: PathBuf,
}

/// Runs `cfg` and writes `config_echo.json`, `rounds.csv` and `summary.json`
/// into `cfg.out_dir`. On a failed round the artifacts gathered so far are
/// still written, with `failed_at_round` set in the summary, and the error
/// is returned wrapped in [`Error::Round`].
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    metrics::write_json(&dir.join(CONFIG_ECHO_JSON), cfg)?;

    let sim = simulate(cfg)?;
    let label = cfg.aggregation_strategy().to_string();
    let mut summary = summarize(&label, &sim.reports);
    if let Some((round, err)) = &sim.failure {
        summary.failed_at_round = Some(*round);
        summary.error = Some(err.to_string());
    }
    emit_with_summary(&sim.reports, dir, &summary)?;

    match sim.failure {
        Some((round, err)) => Err(Error::Round {
            round,
            source: Box::new(err),
        }),
        None => Ok(ExperimentOutcome {
            reports: sim.reports,
            summary,
            out_dir: dir.clone(),
        }),
    }
}

/// Keys that may differ between configs passed to [`compare`].
const COMPARABLE_KEYS: [&str; 5] = ["strategy", "assignment", "truncation_rank", "local_epochs", "out_dir"];

fn check_comparable(configs: &[ExperimentConfig]) -> Result<()> {
    let to_map = |c: &ExperimentConfig| match serde_json::to_value(c) {
        Ok(serde_json::Value::Object(map)) => Ok(map),
        _ => Err(Error::contract("config does not serialize to an object")),
    };
    let base = to_map(&configs[0])?;
    for (i, c) in configs.iter().enumerate().skip(1) {
        let other = to_map(c)?;
        for (key, v) in &base {
            if !COMPARABLE_KEYS.contains(&key.as_str()) && other.get(key) != Some(v) {
                return Err(Error::config(
                    key.clone(),
                    format!("run {i} differs from run 0; pass allow_mixed to compare anyway"),
                ));
            }
        }
    }
    Ok(())
}

/// Runs every config and writes one CSV with a leading `run_id` column
/// (the config's position in `configs`).
pub fn compare(configs: &[ExperimentConfig], out: &Path, allow_mixed: bool) -> Result<Vec<Vec<RoundReport>>> {
    if configs.is_empty() {
        return Err(Error::config("configs", "at least one config is required"));
    }
    for c in configs {
        c.validate()?;
    }
    if !allow_mixed {
        check_comparable(configs)?;
    }

    let mut runs = Vec::with_capacity(configs.len());
    for (i, c) in configs.iter().enumerate() {
        let sim = simulate(c)?;
        if let Some((round, err)) = sim.failure {
            return Err(Error::contract(format!("run {i} failed at round {round}: {err}")));
        }
        runs.push(sim.reports);
    }

    let mut text = format!("run_id,{CSV_HEADER}\n");
    for (i, reports) in runs.iter().enumerate() {
        csv_rows(&mut text, reports, Some(&i.to_string()));
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    metrics::write_file(out, &text)?;
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_three_clients_at_rank_four() {
        let cfg = parse_config_with_env(None, &ConfigOverrides::default(), None).unwrap();
        assert_eq!((cfg.clients, cfg.rank, cfg.rounds, cfg.local_epochs), (3, 4, 15, 3));
    }

    #[test]
    fn truncation_requires_rank() {
        let flags = ConfigOverrides {
            strategy: Some(StrategyName::FedexTrunc),
            ..Default::default()
        };
        let err = parse_config_with_env(None, &flags, None).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "truncation_rank"), "{err}");
    }

    #[test]
    fn truncation_rank_is_capped() {
        let flags = ConfigOverrides {
            strategy: Some(StrategyName::FedexTrunc),
            truncation_rank: Some(13),
            ..Default::default()
        };
        assert!(parse_config_with_env(None, &flags, None).is_err());
        let flags = ConfigOverrides {
            truncation_rank: Some(12),
            ..flags
        };
        assert!(parse_config_with_env(None, &flags, None).is_ok());
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"rounds": 15, "strategy": "fedit", "seed": 4}"#).unwrap();
        let flags = ConfigOverrides {
            rounds: Some(5),
            ..Default::default()
        };
        let cfg = parse_config_with_env(Some(&path), &flags, Some("99")).unwrap();
        assert_eq!(cfg.rounds, 5);
        assert_eq!(cfg.strategy, StrategyName::Fedit);
        assert_eq!(cfg.seed, 4);
    }

    #[test]
    fn env_seed_is_a_fallback() {
        let cfg = parse_config_with_env(None, &ConfigOverrides::default(), Some("17")).unwrap();
        assert_eq!(cfg.seed, 17);
        let flags = ConfigOverrides {
            seed: Some(3),
            ..Default::default()
        };
        assert_eq!(parse_config_with_env(None, &flags, Some("17")).unwrap().seed, 3);
        let err = parse_config_with_env(None, &ConfigOverrides::default(), Some("x")).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == SEED_ENV));
    }

    #[test]
    fn bad_keys_are_named() {
        let err = ConfigOverrides::from_json_str(r#"{"rounds": 2, "bogus": 1}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "bogus"));
        let err = ConfigOverrides::from_json_str(r#"{"strategy": "fedavg"}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "strategy"), "{err}");
        let err = ConfigOverrides::from_json_str(r#"{"rounds": -1}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "rounds"));
    }

    #[test]
    fn constraint_violations_are_named() {
        let cases = [
            (ConfigOverrides { rank: Some(40), ..Default::default() }, "rank"),
            (ConfigOverrides { clients: Some(0), ..Default::default() }, "clients"),
            (ConfigOverrides { heterogeneity: Some(1.5), ..Default::default() }, "heterogeneity"),
            (ConfigOverrides { batch_size: Some(1000), ..Default::default() }, "batch_size"),
            (
                ConfigOverrides {
                    strategy: Some(StrategyName::Fedit),
                    assignment: Some(AssignmentName::Reinit),
                    ..Default::default()
                },
                "assignment",
            ),
        ];
        for (flags, expected) in cases {
            let err = parse_config_with_env(None, &flags, None).unwrap_err();
            assert!(matches!(err, Error::Config { ref key, .. } if key == expected), "{err}");
        }
    }

    #[test]
    fn config_echo_lists_every_field() {
        let value = serde_json::to_value(ExperimentConfig::default()).unwrap();
        let keys: Vec<&str> = value.as_object().unwrap().keys().map(String::as_str).collect();
        for key in [
            "strategy",
            "clients",
            "rank",
            "alpha",
            "rounds",
            "local_epochs",
            "m",
            "n",
            "depth",
            "samples_per_client",
            "heterogeneity",
            "learning_rate",
            "batch_size",
            "seed",
            "truncation_rank",
            "assignment",
            "out_dir",
        ] {
            assert!(keys.contains(&key), "missing {key}");
        }
        // The echo parses back as a config file.
        let text = serde_json::to_string(&ExperimentConfig::default()).unwrap();
        let mut cfg = ExperimentConfig {
            rounds: 1,
            ..Default::default()
        };
        ConfigOverrides::from_json_str(&text).unwrap().apply(&mut cfg);
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn mixed_configs_need_permission() {
        let a = ExperimentConfig {
            rounds: 1,
            ..Default::default()
        };
        let b = ExperimentConfig { clients: 2, ..a.clone() };
        let err = check_comparable(&[a.clone(), b]).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "clients"));
        let c = ExperimentConfig {
            strategy: StrategyName::Fedit,
            local_epochs: 10,
            ..a.clone()
        };
        assert!(check_comparable(&[a, c]).is_ok());
    }
}
