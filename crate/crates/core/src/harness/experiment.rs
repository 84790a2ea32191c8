use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{worker_count, EdgeMode, ExperimentConfig, ExperimentRecord, KernelChoice, Method};
use crate::analytics::{
    assign_groups, ge_on_test_set, order_params, ActivationCache, GeEstimate, RunningStats, TestSet,
};
use crate::dpp::{activation_kernel_for, analytic_kernel, inner_product_kernel, DppKernel, KernelSource};
use crate::error::{Error, Result};
use crate::netcore::{sample_inputs, TwoLayerNet};
use crate::pruning::{
    apply_edge_mask, match_params, optimal_edge_scale, prune_dpp_node, prune_importance_edge,
    prune_importance_node, prune_random_edge, prune_random_edge_exact, prune_random_node, NodeMask, ProbeGram,
};
use crate::rng::{derive_seed, substream};
use crate::trainer::{train, TrainConfig};

// Stream tags under a round's seed.
const TAG_TEACHER: u64 = 1;
const TAG_STUDENT: u64 = 2;
const TAG_TRAIN: u64 = 3;
const TAG_TEST: u64 = 4;
const TAG_PROBES: u64 = 5;
const TAG_MASKS: u64 = 6;
const TAG_KERNEL: u64 = 7;

/// A teacher and the specialized student trained on it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedRound {
    pub round: u32,
    /// Seed of the successful attempt; every stream of the round derives from it.
    pub seed: u64,
    pub attempts: u32,
    pub teacher: TwoLayerNet,
    pub student: TwoLayerNet,
    pub steps_run: usize,
    pub train_seconds: f64,
    pub ge_closed: f64,
}

impl TrainedRound {
    pub fn test_set(&self, cfg: &ExperimentConfig) -> TestSet {
        TestSet::new(derive_seed(self.seed, &[TAG_TEST]), cfg.test_samples, cfg.n)
    }

    pub fn probes(&self, cfg: &ExperimentConfig) -> Array2<f64> {
        sample_inputs(cfg.probe_samples, cfg.n, &mut substream(self.seed, &[TAG_PROBES]))
    }

    pub fn mask_stream(&self, method: Method, k_n: usize) -> crate::rng::Stream {
        substream(self.seed, &[TAG_MASKS, method as u64, k_n as u64])
    }

    /// DPP kernel over the student's hidden nodes per `cfg.kernel`.
    pub fn kernel(&self, cfg: &ExperimentConfig) -> Result<DppKernel> {
        match cfg.kernel {
            KernelChoice::Activation => {
                let xs = sample_inputs(cfg.kernel_samples, cfg.n, &mut substream(self.seed, &[TAG_KERNEL]));
                activation_kernel_for(&self.student, xs.view(), cfg.beta, cfg.eps)
            }
            KernelChoice::InnerProduct => {
                let set = TestSet::new(derive_seed(self.seed, &[TAG_KERNEL]), cfg.kernel_samples, cfg.n);
                inner_product_kernel(&self.student, &set)
            }
            KernelChoice::Analytic => analytic_kernel(&order_params(&self.student, &self.teacher)?.q),
        }
    }
}

/// Per-round facts that accompany the records.
#[derive(Debug, Clone, Serialize)]
pub struct RoundInfo {
    pub round: u32,
    pub seed: u64,
    pub attempts: u32,
    pub steps_run: usize,
    pub train_seconds: f64,
    pub ge_closed: f64,
    pub ge_mc: GeEstimate,
    pub occupancy: Vec<usize>,
    pub group_sums: Vec<f64>,
    pub kernel: KernelSource,
    pub edge_mode: EdgeMode,
}

#[derive(Debug, Clone)]
pub struct RoundResult {
    pub trained: TrainedRound,
    pub info: RoundInfo,
    pub records: Vec<ExperimentRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub rounds: Vec<RoundInfo>,
    /// Per-round records followed by across-round summary records.
    pub records: Vec<ExperimentRecord>,
    pub warnings: Vec<String>,
    pub seconds: f64,
    #[serde(skip)]
    pub trained: Vec<TrainedRound>,
}

impl ExperimentReport {
    pub fn summary(&self) -> impl Iterator<Item = &ExperimentRecord> {
        self.records.iter().filter(|r| r.round.is_none())
    }

    pub fn round_records(&self, round: u32) -> impl Iterator<Item = &ExperimentRecord> {
        self.records.iter().filter(move |r| r.round == Some(round))
    }

    /// Record for `(method, k_n, reweighted)` in `round`, or the summary
    /// when `round` is `None`.
    pub fn find(&self, round: Option<u32>, method: Method, k_n: usize, reweighted: bool) -> Option<&ExperimentRecord> {
        let pct = pct_params(k_n, self.config.k);
        self.records
            .iter()
            .find(|r| r.round == round && r.method == method && r.reweighted == reweighted && r.pct_params == pct)
    }

    pub fn round_ids(&self) -> Vec<u32> {
        self.rounds.iter().map(|r| r.round).collect()
    }
}

pub(crate) fn pct_params(k_n: usize, k: usize) -> f64 {
    100.0 * k_n as f64 / k as f64
}

/// Trains a student for `round`, retrying with fresh seeds until it
/// specializes or `max_retries` retries are used up.
pub fn train_round(cfg: &ExperimentConfig, round: u32) -> Result<TrainedRound> {
    cfg.validate()?;
    for attempt in 0..=cfg.max_retries {
        let seed = derive_seed(cfg.seed, &[round as u64, attempt as u64]);
        let teacher = TwoLayerNet::teacher(cfg.m, cfg.n, cfg.v_star, &mut substream(seed, &[TAG_TEACHER]));
        let init = TwoLayerNet::random(cfg.k, cfg.n, &mut substream(seed, &[TAG_STUDENT]));
        let tc = TrainConfig {
            eta: cfg.eta,
            steps: cfg.train_steps,
            sigma: cfg.sigma,
            seed: derive_seed(seed, &[TAG_TRAIN]),
            ge_log_interval: cfg.ge_log_interval,
            stop_at_threshold: cfg.early_stop,
        };
        let start = Instant::now();
        let trace = train(&teacher, &init, &tc)?;
        let train_seconds = start.elapsed().as_secs_f64();
        if trace.converged {
            return Ok(TrainedRound {
                round,
                seed,
                attempts: attempt + 1,
                ge_closed: trace.final_ge(),
                student: trace.final_student,
                teacher,
                steps_run: trace.steps_run,
                train_seconds,
            });
        }
        log::warn!("round {round} attempt {attempt}: student did not specialize, retrying");
    }
    Err(Error::Experiment(format!(
        "round {round}: no specialized student after {} attempts",
        cfg.max_retries + 1
    )))
}

/// Mean and sample standard deviation of per-mask errors.
fn mask_summary(values: &[f64]) -> (f64, f64) {
    let stats: RunningStats = values.iter().copied().collect();
    let std = if values.len() > 1 { stats.std_dev() } else { 0.0 };
    (stats.mean(), std)
}

/// Least-squares output scale fitting `pruned` to `original` on `probes`.
fn fitted_scale(pruned: &TwoLayerNet, original: &TwoLayerNet, probes: &Array2<f64>) -> Result<f64> {
    let p = pruned.forward_batch(probes.view())?;
    let o = original.forward_batch(probes.view())?;
    let pp = p.dot(&p);
    Ok(if pp > 0.0 { p.dot(&o) / pp } else { 0.0 })
}

/// Applies every configured method at every `k_n` to a trained round.
pub fn prune_round(cfg: &ExperimentConfig, trained: &TrainedRound) -> Result<Vec<ExperimentRecord>> {
    let student = &trained.student;
    let teacher = &trained.teacher;
    let test = trained.test_set(cfg);
    let uses_nodes = cfg.methods.iter().any(|m| m.is_node());
    let cache = if uses_nodes { Some(ActivationCache::build(student, teacher, &test)?) } else { None };
    let probes = if cfg.reweight { Some(trained.probes(cfg)) } else { None };
    let gram = match (&probes, uses_nodes) {
        (Some(p), true) => Some(ProbeGram::new(student, p.view())?),
        _ => None,
    };
    let kernel = if cfg.methods.contains(&Method::DppNode) { Some(trained.kernel(cfg)?) } else { None };

    let mut records = Vec::new();
    let mut push = |method: Method, k_n: usize, reweighted: bool, values: &[f64]| {
        let (ge_mean, ge_std) = mask_summary(values);
        records.push(ExperimentRecord {
            method,
            pct_params: pct_params(k_n, cfg.k),
            round: Some(trained.round),
            ge_mean,
            ge_std,
            reweighted,
            seed: trained.seed,
        });
    };

    for &method in &cfg.methods {
        for &k_n in &cfg.k_n_grid {
            let spec = match_params(k_n, cfg.k, cfg.n)?;
            let mut rng = trained.mask_stream(method, k_n);
            let draws = if method.is_deterministic() { 1 } else { cfg.masks_per_round };
            if method.is_node() {
                let cache = cache.as_ref().expect("built for node methods");
                let masks: Vec<NodeMask> = (0..draws)
                    .map(|_| match method {
                        Method::DppNode => prune_dpp_node(kernel.as_ref().expect("built for dpp"), k_n, &mut rng),
                        Method::RandNode => prune_random_node(cfg.k, k_n, &mut rng),
                        _ => prune_importance_node(student.v().view(), k_n),
                    })
                    .collect::<Result<_>>()?;
                let plain = masks
                    .iter()
                    .map(|m| {
                        let v: Vec<f64> = m.kept().iter().map(|&i| student.v()[i]).collect();
                        Ok(cache.ge_subset(m.kept(), &v)?.value)
                    })
                    .collect::<Result<Vec<_>>>()?;
                push(method, k_n, false, &plain);
                if let Some(gram) = &gram {
                    let refit = masks
                        .iter()
                        .map(|m| {
                            let net = gram.reweight(student, m)?;
                            Ok(cache.ge_subset(m.kept(), net.v().as_slice().expect("contiguous"))?.value)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    push(method, k_n, true, &refit);
                }
            } else {
                let masks = (0..draws)
                    .map(|_| match (method, cfg.edge_mode) {
                        (Method::RandEdge, EdgeMode::Bernoulli) => prune_random_edge(cfg.k, cfg.n, spec.c, &mut rng),
                        (Method::RandEdge, EdgeMode::Exact) => prune_random_edge_exact(cfg.k, cfg.n, spec.k_e, &mut rng),
                        _ => prune_importance_edge(student.w().view(), spec.k_e),
                    })
                    .collect::<Result<Vec<_>>>()?;
                let nets = masks.iter().map(|m| apply_edge_mask(student, m)).collect::<Result<Vec<_>>>()?;
                let mut scales = vec![1.0];
                if let Some(probes) = &probes {
                    scales.push(match method {
                        Method::RandEdge => optimal_edge_scale(spec.c, cfg.z())?,
                        _ => fitted_scale(&nets[0], student, probes)?,
                    });
                }
                let ges = ge_on_test_set(&nets, &scales, teacher, &test)?;
                for (j, reweighted) in [false, true].into_iter().enumerate().take(scales.len()) {
                    let values: Vec<f64> = ges.iter().map(|row| row[j].value).collect();
                    push(method, k_n, reweighted, &values);
                }
            }
        }
    }
    Ok(records)
}

/// Trains and prunes one round.
pub fn run_round(cfg: &ExperimentConfig, round: u32) -> Result<RoundResult> {
    let trained = train_round(cfg, round)?;
    let records = prune_round(cfg, &trained)?;
    let test = trained.test_set(cfg);
    let ge_mc = ge_on_test_set(std::slice::from_ref(&trained.student), &[1.0], &trained.teacher, &test)?[0][0];
    let groups = assign_groups(&order_params(&trained.student, &trained.teacher)?);
    let kernel = match cfg.kernel {
        KernelChoice::Activation => KernelSource::Activation,
        KernelChoice::InnerProduct => KernelSource::InnerProduct,
        KernelChoice::Analytic => KernelSource::Analytic,
    };
    let info = RoundInfo {
        round,
        seed: trained.seed,
        attempts: trained.attempts,
        steps_run: trained.steps_run,
        train_seconds: trained.train_seconds,
        ge_closed: trained.ge_closed,
        ge_mc,
        group_sums: groups.group_sums(trained.student.v().view()),
        occupancy: groups.occupancy,
        kernel,
        edge_mode: cfg.edge_mode,
    };
    log::info!(
        "round {round}: GE {:.4} after {} attempt(s), occupancy {:?}",
        info.ge_mc.value,
        info.attempts,
        info.occupancy
    );
    Ok(RoundResult { trained, info, records })
}

/// Runs every round and appends across-round summaries (mean and standard
/// deviation of the per-round means). Rounds that fail are reported as
/// warnings; the experiment fails only if all do.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| Error::Experiment(e.to_string()))?;
    let outcomes: Vec<Result<RoundResult>> =
        pool.install(|| (0..cfg.rounds).into_par_iter().map(|r| run_round(cfg, r)).collect());

    let mut warnings = Vec::new();
    let mut rounds = Vec::new();
    let mut trained = Vec::new();
    let mut records = Vec::new();
    for (r, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(res) => {
                rounds.push(res.info);
                trained.push(res.trained);
                records.extend(res.records);
            }
            Err(e @ Error::Experiment(_)) => {
                log::warn!("round {r} excluded: {e}");
                warnings.push(format!("round {r} excluded: {e}"));
            }
            Err(e) => return Err(e),
        }
    }
    if rounds.is_empty() {
        return Err(Error::Experiment("every round failed".into()));
    }

    let mut groups: BTreeMap<(Method, u64, bool), Vec<f64>> = BTreeMap::new();
    for r in &records {
        groups.entry((r.method, r.pct_params.to_bits(), r.reweighted)).or_default().push(r.ge_mean);
    }
    let mut summary: Vec<ExperimentRecord> = groups
        .into_iter()
        .map(|((method, pct, reweighted), means)| {
            let (ge_mean, ge_std) = mask_summary(&means);
            ExperimentRecord {
                method,
                pct_params: f64::from_bits(pct),
                round: None,
                ge_mean,
                ge_std,
                reweighted,
                seed: cfg.seed,
            }
        })
        .collect();
    summary.sort_by(|a, b| {
        (a.reweighted, a.pct_params, a.method).partial_cmp(&(b.reweighted, b.pct_params, b.method)).expect("finite")
    });
    records.extend(summary);

    Ok(ExperimentReport {
        config: cfg.clone(),
        rounds,
        records,
        warnings,
        seconds: start.elapsed().as_secs_f64(),
        trained,
    })
}

/// Order parameters of `net` with its first layer masked, for every mask.
pub(crate) fn masked_order_params(net: &TwoLayerNet, teacher: &TwoLayerNet, keep: &Array2<bool>) -> (Array2<f64>, Array2<f64>) {
    let n = net.input_dim() as f64;
    let mut w = net.w().clone();
    w.zip_mut_with(keep, |x, &k| {
        if !k {
            *x = 0.0;
        }
    });
    (w.dot(&w.t()) / n, w.dot(&teacher.w().t()) / n)
}
