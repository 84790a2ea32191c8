//! Experiment configuration, orchestration and result files.

mod experiment;
pub mod table;
pub mod verify;

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dpp::{DEFAULT_BETA, DEFAULT_EPS};
use crate::error::{Error, Result};
use crate::pruning::DEFAULT_PROBE_SAMPLES;

pub use experiment::{prune_round, run_experiment, run_round, train_round, ExperimentReport, RoundInfo, RoundResult, TrainedRound};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    DppNode,
    RandNode,
    ImpNode,
    RandEdge,
    ImpEdge,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::DppNode, Method::RandEdge, Method::RandNode, Method::ImpEdge, Method::ImpNode];

    pub fn id(self) -> &'static str {
        match self {
            Method::DppNode => "dpp_node",
            Method::RandNode => "rand_node",
            Method::ImpNode => "imp_node",
            Method::RandEdge => "rand_edge",
            Method::ImpEdge => "imp_edge",
        }
    }

    pub fn is_node(self) -> bool {
        matches!(self, Method::DppNode | Method::RandNode | Method::ImpNode)
    }

    /// Whether one mask per round suffices.
    pub fn is_deterministic(self) -> bool {
        matches!(self, Method::ImpNode | Method::ImpEdge)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeMode {
    /// Each edge kept independently with probability `c`.
    Bernoulli,
    /// Exactly `k_e` edges kept per hidden node.
    Exact,
}

impl FromStr for EdgeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bernoulli" => Ok(EdgeMode::Bernoulli),
            "exact" => Ok(EdgeMode::Exact),
            _ => Err(Error::InvalidArgument(format!("unknown edge mode {s:?}"))),
        }
    }
}

/// Which similarity kernel DPP node pruning samples from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelChoice {
    Activation,
    InnerProduct,
    Analytic,
}

/// Flat experiment configuration; the JSON field names are the keys below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub v_star: f64,
    pub sigma: f64,
    pub eta: f64,
    pub train_steps: usize,
    pub test_samples: usize,
    pub rounds: u32,
    pub masks_per_round: usize,
    pub k_n_grid: Vec<usize>,
    pub methods: Vec<Method>,
    pub seed: u64,
    /// Also report every method after second-layer reweighting.
    pub reweight: bool,
    pub edge_mode: EdgeMode,
    pub kernel: KernelChoice,
    /// Inputs used to build the activation or inner-product kernel.
    pub kernel_samples: usize,
    pub beta: f64,
    pub eps: f64,
    pub probe_samples: usize,
    pub max_retries: u32,
    pub ge_log_interval: usize,
    /// Stop training once the closed-form error reaches the convergence
    /// threshold instead of using the whole step budget.
    pub early_stop: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n: 500,
            m: 2,
            k: 6,
            v_star: 4.0,
            sigma: 0.0,
            eta: 0.5,
            train_steps: 800_000,
            test_samples: 80_000,
            rounds: 10,
            masks_per_round: 100,
            k_n_grid: vec![1, 2, 3, 4, 5],
            methods: Method::ALL.to_vec(),
            seed: 0,
            reweight: false,
            edge_mode: EdgeMode::Bernoulli,
            kernel: KernelChoice::InnerProduct,
            kernel_samples: 1000,
            beta: DEFAULT_BETA,
            eps: DEFAULT_EPS,
            probe_samples: DEFAULT_PROBE_SAMPLES,
            max_retries: 5,
            ge_log_interval: 20_000,
            early_stop: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Block size `Z = K / M`.
    pub fn z(&self) -> usize {
        self.k / self.m
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.n == 0 || self.m == 0 || self.k == 0 {
            return bad("N, M and K must be positive".into());
        }
        if self.k % self.m != 0 {
            return bad(format!("K = {} is not a multiple of M = {}", self.k, self.m));
        }
        if !(self.eta > 0.0) || !(self.sigma >= 0.0) || !self.v_star.is_finite() {
            return bad("need eta > 0, sigma >= 0 and finite v_star".into());
        }
        if self.train_steps == 0 || self.rounds == 0 || self.masks_per_round == 0 || self.ge_log_interval == 0 {
            return bad("train_steps, rounds, masks_per_round and ge_log_interval must be positive".into());
        }
        if self.test_samples < 100 {
            return bad(format!("test_samples = {} is below 100", self.test_samples));
        }
        if let Some(&kn) = self.k_n_grid.iter().find(|&&kn| kn == 0 || kn > self.k) {
            return bad(format!("k_n = {kn} outside 1..={}", self.k));
        }
        if self.k_n_grid.is_empty() || self.methods.is_empty() {
            return bad("k_n_grid and methods must be nonempty".into());
        }
        if !(self.beta > 0.0) || !(self.eps >= 0.0) || self.kernel_samples == 0 {
            return bad("need beta > 0, eps >= 0 and kernel_samples >= 1".into());
        }
        if self.reweight && self.probe_samples < 10 * self.k {
            return bad(format!("probe_samples must be at least 10 K = {}", 10 * self.k));
        }
        Ok(())
    }
}

/// One row of results. `round` is `None` on across-round summary rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub method: Method,
    pub pct_params: f64,
    pub round: Option<u32>,
    pub ge_mean: f64,
    pub ge_std: f64,
    pub reweighted: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(Error::InvalidArgument(format!("unknown format {s:?}"))),
        }
    }
}

/// Writes `records` to `path`. Nothing is created for an empty list.
pub fn emit(records: &[ExperimentRecord], format: Format, path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let mut out = BufWriter::new(File::create(path)?);
    write_records(records, format, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_records<W: Write>(records: &[ExperimentRecord], format: Format, out: &mut W) -> Result<()> {
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(out);
            for r in records {
                w.serialize(r).map_err(|e| Error::Experiment(e.to_string()))?;
            }
            w.flush()?;
        }
        Format::Json => {
            serde_json::to_writer_pretty(&mut *out, records)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn read_records_json(path: &Path) -> Result<Vec<ExperimentRecord>> {
    Ok(serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?)
}

/// Worker count for round-level parallelism, capped by `PRUNELAB_THREADS`.
pub fn worker_count() -> usize {
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    std::env::var("PRUNELAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .map_or(available, |cap| cap.min(available))
}
