//! Analytic and simulation checks for every acceptance criterion.
//!
//! `verify_theorems` always returns a report; failures are recorded per
//! check rather than propagated, except for configuration errors.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::Serialize;
use serde_json::{json, Value};

use super::experiment::masked_order_params;
use super::table::{self, TableReport, NOISY_SIGMA};
use super::{run_experiment, run_round, ExperimentConfig, ExperimentReport, KernelChoice, Method, TrainedRound};
use crate::analytics::{
    ge_closed_form, ge_monte_carlo, order_params, ActivationCache, RunningStats, TestSet,
};
use crate::dpp::{activation_kernel, analytic_kernel, inner_product_kernel, kdpp_distribution, sample_kdpp, total_variation, DppKernel};
use crate::error::{Error, Result};
use crate::netcore::{sample_inputs, InputSample, TwoLayerNet};
use crate::pruning::{prune_dpp_node, prune_random_edge, prune_random_node, ProbeGram};
use crate::rng::{derive_seed, stream, substream};
use crate::theory::{
    expected_edge_order_params, expected_rand_node_ge, thm1_ge_dpp, thm1_ge_dpp_reweighted, thm3_ge_rand_edge,
    thm4_grid, thm5_grid, TheoryParams,
};
use crate::trainer::{loss_gradient, sample_loss};

// Streams under a round seed, disjoint from the experiment's tags.
const TAG_THM1: u64 = 101;
const TAG_ORACLE_KERNEL: u64 = 102;
const TAG_EDGE_MASKS: u64 = 103;
const TAG_SAMPLER: u64 = 104;
const TAG_PROPERTIES: u64 = 105;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub id: u32,
    pub name: String,
    pub status: Status,
    pub measured: Value,
    pub theory: Value,
    pub tolerance: String,
    pub detail: String,
    pub seconds: f64,
}

impl Check {
    fn new(id: u32, name: &str, pass: bool, measured: Value, theory: Value, tolerance: impl Into<String>, detail: impl Into<String>) -> Self {
        Check {
            id,
            name: name.into(),
            status: if pass { Status::Pass } else { Status::Fail },
            measured,
            theory,
            tolerance: tolerance.into(),
            detail: detail.into(),
            seconds: 0.0,
        }
    }

    fn skipped(id: u32, name: &str, reason: impl Into<String>) -> Self {
        Check {
            id,
            name: name.into(),
            status: Status::Skipped,
            measured: Value::Null,
            theory: Value::Null,
            tolerance: String::new(),
            detail: reason.into(),
            seconds: 0.0,
        }
    }

    fn errored(id: u32, name: &str, err: &Error) -> Self {
        let mut c = Check::skipped(id, name, format!("error: {err}"));
        c.status = Status::Fail;
        c
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyOptions {
    pub grid_z: Vec<usize>,
    pub grid_m: Vec<usize>,
    pub c_resolution: usize,
    /// Inputs for the kernel-versus-Q check.
    pub kernel_oracle_samples: usize,
    pub edge_masks: usize,
    pub sampler_samples: usize,
    /// Also run the noisy panel when the primary config is noiseless.
    pub noisy_panel: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            grid_z: (4..=30).collect(),
            grid_m: (1..=6).collect(),
            c_resolution: 100,
            kernel_oracle_samples: 80_000,
            edge_masks: 10_000,
            sampler_samples: 100_000,
            noisy_panel: true,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub config: ExperimentConfig,
    pub options: VerifyOptions,
    pub checks: Vec<Check>,
    pub table: Option<TableReport>,
    pub warnings: Vec<String>,
    pub seconds: f64,
}

impl VerifyReport {
    /// True when no check failed; skipped checks do not count against it.
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != Status::Fail)
    }

    pub fn check(&self, id: u32) -> Option<&Check> {
        self.checks.iter().find(|c| c.id == id)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let tag = match c.status {
                Status::Pass => "PASS",
                Status::Fail => "FAIL",
                Status::Skipped => "SKIP",
            };
            let _ = writeln!(out, "[{tag}] {:>2} {}: {}", c.id, c.name, c.detail);
        }
        out
    }
}

/// Runs the full suite. The primary experiment is `cfg` with reweighting
/// enabled; a noisy panel runs too when `cfg` is noiseless.
pub fn verify_theorems(cfg: &ExperimentConfig, opts: &VerifyOptions) -> Result<VerifyReport> {
    cfg.validate()?;
    let start = Instant::now();
    let primary_cfg = ExperimentConfig { reweight: true, ..cfg.clone() };
    let primary = run_experiment(&primary_cfg);
    let noisy = if cfg.sigma == 0.0 && opts.noisy_panel {
        Some(run_experiment(&ExperimentConfig { sigma: NOISY_SIGMA, ..primary_cfg.clone() }))
    } else {
        None
    };
    let mut report = verify_with(&primary_cfg, primary.as_ref(), noisy.as_ref().map(|r| r.as_ref()), opts);
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Evaluates the suite against already-run experiments.
pub fn verify_with(
    cfg: &ExperimentConfig,
    primary: std::result::Result<&ExperimentReport, &Error>,
    noisy: Option<std::result::Result<&ExperimentReport, &Error>>,
    opts: &VerifyOptions,
) -> VerifyReport {
    let start = Instant::now();
    let mut checks = Vec::new();
    let mut warnings = Vec::new();
    let noisy_ok = noisy.and_then(|r| r.ok());
    if let Some(Err(e)) = noisy {
        warnings.push(format!("noisy panel failed: {e}"));
    }
    if let Ok(p) = primary {
        warnings.extend(p.warnings.iter().cloned());
    }
    if let Some(n) = noisy_ok {
        warnings.extend(n.warnings.iter().map(|w| format!("noisy panel: {w}")));
    }

    let needs_primary = |id: u32, name: &str, f: &dyn Fn(&ExperimentReport) -> Result<Check>| -> Check {
        match primary {
            Ok(p) => f(p).unwrap_or_else(|e| Check::errored(id, name, &e)),
            Err(e) => Check::errored(id, name, e),
        }
    };
    let timed = |f: &mut dyn FnMut() -> Check| -> Check {
        let t = Instant::now();
        let mut c = f();
        c.seconds = t.elapsed().as_secs_f64();
        c
    };

    checks.push(timed(&mut || needs_primary(1, "unpruned baseline", &|p| baseline(p, noisy_ok))));
    checks.push(timed(&mut || needs_primary(2, "dpp node error formula", &|p| dpp_exactness(cfg, p))));
    checks.push(timed(&mut || dpp_beats_random_analytic()));
    checks.push(timed(&mut || needs_primary(4, "dpp node beats random and importance node", &dpp_beats_others)));
    checks.push(timed(&mut || needs_primary(5, "random edge error formula", &rand_edge_formula)));
    checks.push(timed(&mut || grid_check(6, "edge beats node grid", opts, cfg.v_star, false)));
    checks.push(timed(&mut || grid_check(7, "reweighted node beats rescaled edge grid", opts, cfg.v_star, true)));
    let mut table_report = None;
    checks.push(timed(&mut || {
        let name = "reference table";
        if !table::matches_reference_setting(cfg) {
            return Check::skipped(8, name, "reference values exist only for the default setting");
        }
        let clean = match primary {
            Ok(p) if p.config.sigma == 0.0 => Some(p),
            Ok(_) => None,
            Err(e) => return Check::errored(8, name, e),
        };
        match table::table_from_reports(clean, noisy_ok) {
            Ok(t) => {
                let c = table_check(&t);
                table_report = Some(t);
                c
            }
            Err(e) => Check::errored(8, name, &e),
        }
    }));
    checks.push(timed(&mut || needs_primary(9, "inner-product kernel equals Q", &|p| kernel_vs_q(p, opts))));
    checks.push(timed(&mut || needs_primary(10, "group second-layer sums", &group_sums)));
    checks.push(timed(&mut || needs_primary(11, "random edge order parameters", &|p| edge_order_params(p, opts))));
    checks.push(timed(&mut || sampler_vs_oracle(cfg.seed, opts).unwrap_or_else(|e| Check::errored(12, "k-dpp sampler", &e))));
    checks.push(timed(&mut || needs_primary(13, "property suites", &|p| properties(cfg, p))));

    VerifyReport {
        config: cfg.clone(),
        options: opts.clone(),
        checks,
        table: table_report,
        warnings,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn first_trained(p: &ExperimentReport) -> Result<&TrainedRound> {
    p.trained.first().ok_or_else(|| Error::Experiment("no trained round".into()))
}

fn max_of(xs: impl IntoIterator<Item = f64>) -> f64 {
    xs.into_iter().fold(f64::NEG_INFINITY, f64::max)
}

fn baseline(p: &ExperimentReport, noisy: Option<&ExperimentReport>) -> Result<Check> {
    const CLEAN_MAX: f64 = 0.06;
    const NOISY_RANGE: (f64, f64) = (0.15, 0.35);
    const SECONDS_MAX: f64 = 300.0;
    let (clean, noisy) = if p.config.sigma == 0.0 { (Some(p), noisy) } else { (None, Some(p)) };
    let ges = |r: &ExperimentReport| r.rounds.iter().map(|i| i.ge_mc.value).collect::<Vec<_>>();
    let mut ok = true;
    let mut parts = Vec::new();
    let mut seconds = Vec::new();
    if let Some(c) = clean {
        let g = ges(c);
        let worst = max_of(g.iter().copied());
        ok &= worst <= CLEAN_MAX && c.rounds.len() == c.config.rounds as usize;
        parts.push(format!("noiseless max GE {worst:.4} over {} rounds", g.len()));
        seconds.extend(c.rounds.iter().map(|r| r.train_seconds));
    } else {
        ok = false;
        parts.push("no noiseless run".into());
    }
    if let Some(n) = noisy {
        let g = ges(n);
        let inside = g.iter().filter(|&&x| (NOISY_RANGE.0..=NOISY_RANGE.1).contains(&x)).count();
        ok &= inside == g.len() && n.rounds.len() == n.config.rounds as usize;
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        parts.push(format!("noisy GE mean {mean:.4}, {inside}/{} rounds in range", g.len()));
        seconds.extend(n.rounds.iter().map(|r| r.train_seconds));
    } else {
        ok = false;
        parts.push("no noisy run".into());
    }
    let slowest = max_of(seconds.iter().copied());
    ok &= slowest <= SECONDS_MAX;
    parts.push(format!("slowest training {slowest:.1}s"));
    Ok(Check::new(
        1,
        "unpruned baseline",
        ok,
        json!({
            "noiseless_ge": clean.map(ges),
            "noisy_ge": noisy.map(ges),
            "max_train_seconds": slowest,
        }),
        json!({ "noiseless_reference": table::NOISELESS_UNPRUNED, "noisy_reference": table::NOISY_UNPRUNED }),
        format!("noiseless <= {CLEAN_MAX}; noisy in [{}, {}]; training <= {SECONDS_MAX}s", NOISY_RANGE.0, NOISY_RANGE.1),
        parts.join("; "),
    ))
}

/// Mean Monte-Carlo error of DPP masks under the analytic kernel, with and
/// without reweighting, plus random-node masks for the ordering gate.
struct NodeMeans {
    dpp: f64,
    dpp_reweighted: f64,
    random: RunningStats,
}

fn analytic_node_means(cfg: &ExperimentConfig, t: &TrainedRound, k_n: usize) -> Result<NodeMeans> {
    let test = t.test_set(cfg);
    let cache = ActivationCache::build(&t.student, &t.teacher, &test)?;
    let probes = t.probes(cfg);
    let gram = ProbeGram::new(&t.student, probes.view())?;
    let kernel = analytic_kernel(&order_params(&t.student, &t.teacher)?.q)?;
    let mut rng = substream(t.seed, &[TAG_THM1, k_n as u64]);
    let (mut plain, mut refit, mut random) = (RunningStats::default(), RunningStats::default(), RunningStats::default());
    for _ in 0..cfg.masks_per_round {
        let mask = prune_dpp_node(&kernel, k_n, &mut rng)?;
        let v: Vec<f64> = mask.kept().iter().map(|&i| t.student.v()[i]).collect();
        plain.push(cache.ge_subset(mask.kept(), &v)?.value);
        let net = gram.reweight(&t.student, &mask)?;
        refit.push(cache.ge_subset(mask.kept(), net.v().as_slice().expect("contiguous"))?.value);
        let other = prune_random_node(cfg.k, k_n, &mut rng)?;
        let v: Vec<f64> = other.kept().iter().map(|&i| t.student.v()[i]).collect();
        random.push(cache.ge_subset(other.kept(), &v)?.value);
    }
    Ok(NodeMeans { dpp: plain.mean(), dpp_reweighted: refit.mean(), random })
}

/// Round-averaged analytic-kernel node errors at one `k_n`.
struct PooledNodeMeans {
    dpp: f64,
    dpp_reweighted: f64,
    random: RunningStats,
    per_round: Vec<(u32, f64, f64)>,
}

fn pooled_node_means(cfg: &ExperimentConfig, p: &ExperimentReport, k_n: usize) -> Result<PooledNodeMeans> {
    if p.trained.is_empty() {
        return Err(Error::Experiment("no trained round".into()));
    }
    let mut per_round = Vec::with_capacity(p.trained.len());
    let mut random = RunningStats::default();
    for t in &p.trained {
        let m = analytic_node_means(cfg, t, k_n)?;
        random.merge(&m.random);
        per_round.push((t.round, m.dpp, m.dpp_reweighted));
    }
    let n = per_round.len() as f64;
    Ok(PooledNodeMeans {
        dpp: per_round.iter().map(|r| r.1).sum::<f64>() / n,
        dpp_reweighted: per_round.iter().map(|r| r.2).sum::<f64>() / n,
        random,
        per_round,
    })
}

// The formula assumes T = I; a single finite-N teacher moves the pruned
// error by several percent, so the measurement is averaged over rounds.
fn dpp_exactness(cfg: &ExperimentConfig, p: &ExperimentReport) -> Result<Check> {
    let name = "dpp node error formula";
    let z = cfg.z();
    let k_values: Vec<usize> =
        (1..=cfg.m.min(2)).chain(std::iter::once(cfg.m)).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    if cfg.sigma > 0.0 {
        // Label noise breaks the formula's assumptions; only the ordering
        // against random node masks is checked.
        let mut ok = true;
        let mut rows = Vec::new();
        for &k_n in &k_values {
            let m = pooled_node_means(cfg, p, k_n)?;
            let se = m.random.std_dev() / (m.random.count() as f64).sqrt();
            ok &= m.dpp <= m.random.mean() + 2.0 * se;
            rows.push(json!({ "k_n": k_n, "dpp": m.dpp, "random_node": m.random.mean() }));
        }
        return Ok(Check::new(2, name, ok, Value::Array(rows), Value::Null, "dpp <= random node + 2 se", "noisy labels: ordering only"));
    }
    let norm = cfg.m as f64 * cfg.v_star * cfg.v_star / 6.0;
    let bound = 0.05 * cfg.v_star * cfg.v_star;
    let mut ok = true;
    let mut rows = Vec::new();
    let mut parts = Vec::new();
    let mut worst = 0.0f64;
    for &k_n in &k_values {
        let params = TheoryParams::new(cfg.m, z, cfg.v_star).with_k_n(k_n);
        let m = pooled_node_means(cfg, p, k_n)?;
        let theory = thm1_ge_dpp(&params)?;
        let theory_rw = thm1_ge_dpp_reweighted(&params)?;
        let dev = ((m.dpp - theory).abs() / norm).max((m.dpp_reweighted - theory_rw).abs() / norm);
        worst = worst.max(dev);
        ok &= dev <= 0.05;
        let worst_rw = max_of(m.per_round.iter().map(|r| r.2));
        if k_n == cfg.m {
            ok &= worst_rw <= bound;
        }
        let spread = (
            m.per_round.iter().map(|r| r.1).fold(f64::INFINITY, f64::min),
            max_of(m.per_round.iter().map(|r| r.1)),
        );
        parts.push(format!(
            "k_n={k_n}: {:.3} vs {theory:.3}, reweighted {:.3} vs {theory_rw:.3} (rounds {:.3}..{:.3})",
            m.dpp, m.dpp_reweighted, spread.0, spread.1
        ));
        rows.push(json!({
            "k_n": k_n, "measured": m.dpp, "theory": theory,
            "measured_reweighted": m.dpp_reweighted, "theory_reweighted": theory_rw,
            "worst_round_reweighted": worst_rw,
            "per_round": m.per_round.iter().map(|r| json!({ "round": r.0, "plain": r.1, "reweighted": r.2 })).collect::<Vec<_>>(),
        }));
    }
    Ok(Check::new(
        2,
        name,
        ok,
        Value::Array(rows),
        json!({ "normalizer": norm, "worst_relative_deviation": worst }),
        "round mean within 0.05 M v*^2 / 6; reweighted at k_n = M <= 0.05 v*^2 in every round",
        parts.join("; "),
    ))
}

fn dpp_beats_random_analytic() -> Check {
    let name = "expected random node error exceeds dpp node error";
    let (mut cases, mut ties) = (0, 0);
    let mut violations = Vec::new();
    for m in 1..=6 {
        for z in 2..=8 {
            for k_n in 1..=m {
                let p = TheoryParams::new(m, z, 1.0).with_k_n(k_n);
                let (rand, dpp) = match (expected_rand_node_ge(&p), thm1_ge_dpp(&p)) {
                    (Ok(a), Ok(b)) => (a, b),
                    (Err(e), _) | (_, Err(e)) => return Check::errored(3, name, &e),
                };
                cases += 1;
                // Exact ties come out either way by a few ulps.
                if rand - dpp <= 1e-12 * dpp.abs().max(1.0) {
                    let tie = (rand - dpp).abs() <= 1e-12 * dpp.abs().max(1.0);
                    ties += tie as usize;
                    violations.push(json!({ "M": m, "Z": z, "k_n": k_n, "random": rand, "dpp": dpp, "tie": tie }));
                }
            }
        }
    }
    let reversed = violations.len() - ties;
    Check::new(
        3,
        name,
        violations.is_empty(),
        json!({ "cases": cases, "ties": ties, "violations": violations }),
        json!("strict inequality"),
        "strict >",
        format!("{} of {cases} cases strict; {ties} ties (k_n = 1 or M = 1); {reversed} reversed", cases - violations.len()),
    )
}

fn round_ge(p: &ExperimentReport, round: u32, method: Method, k_n: usize, reweighted: bool) -> Result<f64> {
    p.find(Some(round), method, k_n, reweighted)
        .map(|r| r.ge_mean)
        .ok_or_else(|| Error::Experiment(format!("missing {method} k_n={k_n} reweighted={reweighted} in round {round}")))
}

fn required_rounds(total: usize) -> usize {
    (total * 9).div_ceil(10)
}

fn dpp_beats_others(p: &ExperimentReport) -> Result<Check> {
    let cfg = &p.config;
    let ks: Vec<usize> = cfg.k_n_grid.iter().copied().filter(|&k| k <= cfg.m).collect();
    let mut good_rounds = 0;
    let mut failures = Vec::new();
    for round in p.round_ids() {
        let mut ok = true;
        for &k_n in &ks {
            for rw in [false, true] {
                let dpp = round_ge(p, round, Method::DppNode, k_n, rw)?;
                for other in [Method::RandNode, Method::ImpNode] {
                    let v = round_ge(p, round, other, k_n, rw)?;
                    if !(v > dpp) {
                        ok = false;
                        failures.push(format!("r{round} k_n={k_n}{} {other} {v:.3} <= dpp {dpp:.3}", if rw { " rw" } else { "" }));
                    }
                }
            }
        }
        good_rounds += ok as usize;
    }
    let need = required_rounds(cfg.rounds as usize);
    let mut detail = format!("{good_rounds}/{} rounds satisfy every comparison (need {need})", cfg.rounds);
    if !failures.is_empty() {
        let _ = write!(detail, "; e.g. {}", failures.iter().take(4).cloned().collect::<Vec<_>>().join(", "));
    }
    Ok(Check::new(
        4,
        "dpp node beats random and importance node",
        good_rounds >= need,
        json!({ "rounds_passed": good_rounds, "violations": failures }),
        json!({ "rounds_required": need }),
        "at least 9 of 10 rounds",
        detail,
    ))
}

fn rand_edge_formula(p: &ExperimentReport) -> Result<Check> {
    let cfg = &p.config;
    let mut ok = true;
    let mut rows = Vec::new();
    let mut parts = Vec::new();
    for k_n in 1..=3usize.min(cfg.k) {
        let c = k_n as f64 / cfg.k as f64;
        let theory = thm3_ge_rand_edge(&TheoryParams::new(cfg.m, cfg.z(), cfg.v_star).with_c(c))?;
        let measured = p
            .find(None, Method::RandEdge, k_n, false)
            .ok_or_else(|| Error::Experiment(format!("random edge at k_n={k_n} not in the experiment grid")))?
            .ge_mean;
        let rel = (measured - theory).abs() / theory;
        ok &= rel <= 0.10;
        parts.push(format!("c={k_n}/{}: {measured:.3} vs {theory:.3} ({:.1}%)", cfg.k, 100.0 * rel));
        rows.push(json!({ "c": c, "measured": measured, "theory": theory, "relative": rel }));
    }
    Ok(Check::new(5, "random edge error formula", ok, Value::Array(rows), Value::Null, "10% relative", parts.join("; ")))
}

fn grid_check(id: u32, name: &str, opts: &VerifyOptions, v_star: f64, reweighted: bool) -> Check {
    if let Some(z) = opts.grid_z.iter().find(|&&z| z < 4) {
        return Check::skipped(id, name, format!("outside theorem hypothesis (Z = {z} < 4)"));
    }
    let mut count = 0;
    let mut bad = Vec::new();
    let mut extreme = if reweighted { f64::NEG_INFINITY } else { f64::INFINITY };
    for &m in &opts.grid_m {
        let grid = if reweighted {
            thm5_grid(m, v_star, &opts.grid_z, opts.c_resolution)
        } else {
            thm4_grid(m, v_star, &opts.grid_z, opts.c_resolution)
        };
        let grid = match grid {
            Ok(g) => g,
            Err(e) => return Check::errored(id, name, &e),
        };
        for (z, c, d) in grid.iter() {
            count += 1;
            let fine = if reweighted { d <= 0.0 } else { d >= 0.0 };
            extreme = if reweighted { extreme.max(d) } else { extreme.min(d) };
            if !fine {
                bad.push(json!({ "M": m, "Z": z, "c": c, "diff": d }));
            }
        }
    }
    let (sign, word) = if reweighted { ("<= 0", "max") } else { (">= 0", "min") };
    Check::new(
        id,
        name,
        bad.is_empty(),
        json!({ "entries": count, "extreme": extreme, "violations": bad }),
        json!(sign),
        format!("every entry {sign}"),
        format!("{count} entries over M in {:?}, {word} {extreme:.3e}", opts.grid_m),
    )
}

fn table_check(t: &TableReport) -> Check {
    let mut ok = t.passed() && t.panels.len() == 2;
    let seconds = t.seconds();
    ok &= seconds <= 1800.0;
    let detail = t
        .panels
        .iter()
        .map(|p| {
            format!(
                "sigma={}: {}/{} cells, {}/{} orders",
                p.sigma,
                p.cells_passed(),
                p.cell_count(),
                p.orders_passed(),
                p.rows.len()
            )
        })
        .chain(std::iter::once(format!("{seconds:.0}s")))
        .collect::<Vec<_>>()
        .join("; ");
    let measured = serde_json::to_value(t).unwrap_or(Value::Null);
    Check::new(8, "reference table", ok, measured, Value::Null, "0.20 absolute per cell, column order per row, 30 min", detail)
}

fn kernel_vs_q(p: &ExperimentReport, opts: &VerifyOptions) -> Result<Check> {
    let mut worst = 0.0f64;
    let mut rows = Vec::new();
    for t in &p.trained {
        let q = order_params(&t.student, &t.teacher)?.q;
        let set = TestSet::new(derive_seed(t.seed, &[TAG_ORACLE_KERNEL]), opts.kernel_oracle_samples, t.student.input_dim());
        let l = inner_product_kernel(&t.student, &set)?.l;
        let rel = frobenius(&(&l - &q)) / frobenius(&q);
        worst = worst.max(rel);
        rows.push(json!({ "round": t.round, "relative_distance": rel }));
    }
    Ok(Check::new(
        9,
        "inner-product kernel equals Q",
        worst <= 0.05 && !rows.is_empty(),
        Value::Array(rows),
        json!(0.0),
        "||L - Q||_F <= 0.05 ||Q||_F",
        format!("worst relative Frobenius distance {worst:.4} over {} rounds", p.trained.len()),
    ))
}

fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn group_sums(p: &ExperimentReport) -> Result<Check> {
    let v = p.config.v_star;
    let mut worst = 0.0f64;
    let mut good = 0;
    for r in &p.rounds {
        let dev = max_of(r.group_sums.iter().map(|s| (s - v).abs() / v.abs()));
        worst = worst.max(dev);
        good += (dev <= 0.05) as usize;
    }
    let sums: Vec<&Vec<f64>> = p.rounds.iter().map(|r| &r.group_sums).collect();
    Ok(Check::new(
        10,
        "group second-layer sums",
        good == p.config.rounds as usize,
        json!(sums),
        json!(v),
        "5% of v* in every group and round",
        format!("{good}/{} rounds within 5%, worst deviation {:.1}%", p.config.rounds, 100.0 * worst),
    ))
}

fn edge_order_params(p: &ExperimentReport, opts: &VerifyOptions) -> Result<Check> {
    let t = first_trained(p)?;
    let op = order_params(&t.student, &t.teacher)?;
    let (k, m) = (op.student_count(), op.teacher_count());
    let mut total = 0;
    let mut worst = 0.0f64;
    let mut bad = Vec::new();
    for (j, c) in [1.0 / 6.0, 0.5].into_iter().enumerate() {
        let expected = expected_edge_order_params(&op, c)?;
        let mut q_stats = vec![RunningStats::default(); k * k];
        let mut r_stats = vec![RunningStats::default(); k * m];
        let mut rng = substream(t.seed, &[TAG_EDGE_MASKS, j as u64]);
        for _ in 0..opts.edge_masks {
            let mask = prune_random_edge(k, t.student.input_dim(), c, &mut rng)?;
            let (q, r) = masked_order_params(&t.student, &t.teacher, mask.kept());
            q_stats.iter_mut().zip(q.iter()).for_each(|(s, &x)| s.push(x));
            r_stats.iter_mut().zip(r.iter()).for_each(|(s, &x)| s.push(x));
        }
        let entries = (0..k)
            .flat_map(|a| (a..k).map(move |b| ("Q", a, b)))
            .chain((0..k).flat_map(|a| (0..m).map(move |b| ("R", a, b))));
        for (which, a, b) in entries {
            let (stats, target) = if which == "Q" {
                (q_stats[a * k + b], expected.q[[a, b]])
            } else {
                (r_stats[a * m + b], expected.r[[a, b]])
            };
            let est = stats.estimate();
            let z = if est.std_err > 0.0 { (est.value - target).abs() / est.std_err } else { 0.0 };
            total += 1;
            worst = worst.max(z);
            if z > 3.0 {
                bad.push(json!({ "c": c, "entry": format!("{which}[{a},{b}]"), "mean": est.value, "expected": target, "z": z }));
            }
        }
    }
    let detail = format!("{}/{total} entries within 3 se, worst {worst:.2} se", total - bad.len());
    Ok(Check::new(
        11,
        "random edge order parameters",
        bad.is_empty(),
        json!({ "entries": total, "worst_z": worst, "violations": bad }),
        json!("E[Q_ii] = c Q_ii, E[Q_ik] = c^2 Q_ik, E[R] = c R"),
        "3 standard errors",
        detail,
    ))
}

/// Five fixed kernels over ground sets of size 4 to 8, with subset sizes.
pub fn sampler_test_kernels(seed: u64) -> Result<Vec<(DppKernel, usize)>> {
    let mut rng = substream(seed, &[TAG_SAMPLER]);
    let gram = |n: usize, rank: usize, ridge: f64, rng: &mut crate::rng::Stream| -> Result<DppKernel> {
        let b = sample_inputs(n, rank, rng);
        let mut l = b.dot(&b.t()) / rank as f64;
        l.diag_mut().iter_mut().for_each(|d| *d += ridge);
        DppKernel::from_matrix(l)
    };
    let acts = TwoLayerNet::random(4, 20, &mut rng).activations_batch(sample_inputs(60, 20, &mut rng).view())?;
    let block = {
        let mut l = Array2::from_elem((6, 6), 0.0);
        for i in 0..6 {
            for j in 0..6 {
                l[[i, j]] = if i / 2 == j / 2 { 1.0 } else { 0.2 };
            }
            l[[i, i]] += 0.05;
        }
        DppKernel::from_matrix(l)?
    };
    let acts8 = TwoLayerNet::random(8, 30, &mut rng).activations_batch(sample_inputs(80, 30, &mut rng).view())?;
    Ok(vec![
        (activation_kernel(acts.t(), 0.3, 1e-6)?, 2),
        (gram(5, 3, 0.1, &mut rng)?, 2),
        (block, 3),
        (gram(7, 7, 0.0, &mut rng)?, 3),
        (activation_kernel(acts8.t(), 0.05, 1e-6)?, 4),
    ])
}

fn sampler_vs_oracle(seed: u64, opts: &VerifyOptions) -> Result<Check> {
    let mut rows = Vec::new();
    let mut worst = 0.0f64;
    for (i, (kernel, k)) in sampler_test_kernels(seed)?.into_iter().enumerate() {
        let exact = kdpp_distribution(&kernel, k)?;
        let mut rng = substream(seed, &[TAG_SAMPLER, 1, i as u64]);
        let mut counts = HashMap::new();
        for _ in 0..opts.sampler_samples {
            *counts.entry(sample_kdpp(&kernel, k, &mut rng)?).or_insert(0usize) += 1;
        }
        let tv = total_variation(&counts, &exact);
        worst = worst.max(tv);
        rows.push(json!({ "ground": kernel.size(), "k": k, "tv": tv }));
    }
    Ok(Check::new(
        12,
        "k-dpp sampler",
        worst <= 0.02,
        Value::Array(rows),
        json!(0.0),
        "TV <= 0.02",
        format!("5 kernels, {} samples each, worst TV {worst:.4}", opts.sampler_samples),
    ))
}

/// Largest central-difference deviation from the analytic gradient,
/// relative to the gradient's largest component.
fn gradient_check_error(seed: u64) -> Result<f64> {
    const H: f64 = 1e-5;
    let mut rng = stream(seed);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let net = TwoLayerNet::random(3, 12, &mut rng);
        let teacher = TwoLayerNet::teacher(2, 12, 1.5, &mut rng);
        let x = sample_inputs(1, 12, &mut rng).row(0).to_owned();
        let y = teacher.forward_batch(x.view().insert_axis(ndarray::Axis(0)))?[0] + rng.random::<f64>();
        let sample = InputSample { x, y };
        let (gw, gv) = loss_gradient(&net, &sample)?;
        let scale = gw.iter().chain(gv.iter()).fold(0.0f64, |a, g| a.max(g.abs()));
        let loss_at = |w: Array2<f64>, v: Array1<f64>| -> Result<f64> { sample_loss(&TwoLayerNet::new(w, v)?, &sample) };
        for idx in 0..gw.len() {
            let (r, c) = (idx / gw.ncols(), idx % gw.ncols());
            let (mut wp, mut wm) = (net.w().clone(), net.w().clone());
            wp[[r, c]] += H;
            wm[[r, c]] -= H;
            let fd = (loss_at(wp, net.v().clone())? - loss_at(wm, net.v().clone())?) / (2.0 * H);
            worst = worst.max((fd - gw[[r, c]]).abs() / scale);
        }
        for i in 0..gv.len() {
            let (mut vp, mut vm) = (net.v().clone(), net.v().clone());
            vp[i] += H;
            vm[i] -= H;
            let fd = (loss_at(net.w().clone(), vp)? - loss_at(net.w().clone(), vm)?) / (2.0 * H);
            worst = worst.max((fd - gv[i]).abs() / scale);
        }
    }
    Ok(worst)
}

/// Largest |MC - closed form| in units of the MC standard error.
fn closed_vs_mc_sigmas(seed: u64) -> Result<f64> {
    let mut rng = stream(seed);
    let mut worst = 0.0f64;
    for k in 2..=6 {
        let student = TwoLayerNet::random(k, 60, &mut rng);
        let teacher = TwoLayerNet::teacher(2, 60, 2.0, &mut rng);
        let op = order_params(&student, &teacher)?;
        let closed = ge_closed_form(&op, student.v().view(), teacher.v().view())?;
        let mc = ge_monte_carlo(&student, &teacher, 40_000, &mut rng)?;
        worst = worst.max((mc.value - closed).abs() / mc.std_err);
    }
    Ok(worst)
}

fn determinism(cfg: &ExperimentConfig) -> Result<bool> {
    let tiny = ExperimentConfig {
        n: 30,
        k: 4,
        m: 2,
        v_star: 2.0,
        train_steps: 20_000,
        test_samples: 1_000,
        masks_per_round: 4,
        k_n_grid: vec![1, 2],
        probe_samples: 200,
        kernel_samples: 100,
        ge_log_interval: 5_000,
        reweight: true,
        kernel: KernelChoice::InnerProduct,
        max_retries: 20,
        seed: cfg.seed,
        ..Default::default()
    };
    let a = run_round(&tiny, 0)?;
    let b = run_round(&tiny, 0)?;
    Ok(a.records == b.records && a.trained.student == b.trained.student)
}

fn conjecture_rounds(p: &ExperimentReport) -> Result<(usize, Vec<String>)> {
    let cfg = &p.config;
    let mut good = 0;
    let mut failures = Vec::new();
    for round in p.round_ids() {
        let mut ok = true;
        for &k_n in cfg.k_n_grid.iter().filter(|&&k| k < cfg.k) {
            for (edge, node) in [(Method::RandEdge, Method::RandNode), (Method::ImpEdge, Method::ImpNode)] {
                let (e, n) = (round_ge(p, round, edge, k_n, false)?, round_ge(p, round, node, k_n, false)?);
                if e > n {
                    ok = false;
                    failures.push(format!("r{round} k_n={k_n} {edge} {e:.3} > {node} {n:.3}"));
                }
            }
        }
        good += ok as usize;
    }
    Ok((good, failures))
}

fn properties(cfg: &ExperimentConfig, p: &ExperimentReport) -> Result<Check> {
    let seed = derive_seed(cfg.seed, &[TAG_PROPERTIES]);
    let grad = gradient_check_error(seed)?;
    let sigmas = closed_vs_mc_sigmas(seed ^ 1)?;
    let deterministic = determinism(cfg)?;
    let (good, failures) = conjecture_rounds(p)?;
    let need = required_rounds(cfg.rounds as usize);
    let ok = grad <= 1e-6 && sigmas <= 3.0 && deterministic && good >= need;
    let mut detail = format!(
        "gradient rel err {grad:.1e}; MC vs closed {sigmas:.2} se; deterministic {deterministic}; edge <= node in {good}/{} rounds (need {need})",
        cfg.rounds
    );
    if let Some(f) = failures.first() {
        let _ = write!(detail, "; e.g. {f}");
    }
    Ok(Check::new(
        13,
        "property suites",
        ok,
        json!({
            "gradient_relative_error": grad,
            "closed_vs_mc_max_sigmas": sigmas,
            "deterministic": deterministic,
            "conjecture_rounds": good,
            "conjecture_violations": failures,
        }),
        json!({ "gradient": 1e-6, "sigmas": 3.0, "rounds_required": need }),
        "1e-6 relative; 3 se; identical reruns; 9 of 10 rounds",
        detail,
    ))
}
