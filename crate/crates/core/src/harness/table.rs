//! Side-by-side comparison of measured errors with the published reference
//! table for the default configuration.

use std::fmt::Write as _;

use serde::Serialize;

use super::{run_experiment, ExperimentConfig, ExperimentReport, Method};
use crate::error::{Error, Result};

/// Absolute error allowed per cell.
pub const CELL_TOLERANCE: f64 = 0.20;

/// Row labels (percent of parameters kept) for `k_n = 1..=5` of `K = 6`.
pub const REFERENCE_PCT: [f64; 5] = [17.0, 33.0, 50.0, 67.0, 83.0];

/// Column order of the reference table.
pub const REFERENCE_COLUMNS: [Method; 5] =
    [Method::DppNode, Method::RandEdge, Method::RandNode, Method::ImpEdge, Method::ImpNode];

pub const NOISELESS_REFERENCE: [[f64; 5]; 5] = [
    [3.737, 3.451, 3.978, 1.911, 3.760],
    [2.310, 2.300, 2.800, 0.814, 2.719],
    [1.438, 1.402, 1.748, 0.311, 1.540],
    [0.740, 0.730, 1.046, 0.110, 0.721],
    [0.258, 0.204, 0.540, 0.040, 0.360],
];

pub const NOISY_REFERENCE: [[f64; 5]; 5] = [
    [4.000, 3.769, 4.188, 1.963, 4.167],
    [2.622, 2.558, 3.041, 0.905, 2.910],
    [1.633, 1.675, 2.023, 0.450, 2.031],
    [0.890, 1.007, 1.269, 0.271, 1.144],
    [0.394, 0.490, 0.643, 0.253, 0.659],
];

pub const NOISELESS_UNPRUNED: f64 = 0.051;
pub const NOISY_UNPRUNED: f64 = 0.241;
pub const NOISY_SIGMA: f64 = 0.25;

#[derive(Debug, Clone, Serialize)]
pub struct Cell {
    pub method: Method,
    pub reference: f64,
    pub measured: f64,
    pub std: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Row {
    pub pct_label: f64,
    pub k_n: usize,
    pub cells: Vec<Cell>,
    /// Methods from lowest to highest error.
    pub reference_order: Vec<Method>,
    pub measured_order: Vec<Method>,
    pub order_ok: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Panel {
    pub sigma: f64,
    pub unpruned_reference: f64,
    pub unpruned_measured: f64,
    pub rows: Vec<Row>,
    pub seconds: f64,
}

impl Panel {
    pub fn cells_passed(&self) -> usize {
        self.rows.iter().flat_map(|r| &r.cells).filter(|c| c.pass).count()
    }

    pub fn cell_count(&self) -> usize {
        self.rows.iter().map(|r| r.cells.len()).sum()
    }

    pub fn orders_passed(&self) -> usize {
        self.rows.iter().filter(|r| r.order_ok).count()
    }

    pub fn passed(&self) -> bool {
        self.cells_passed() == self.cell_count() && self.orders_passed() == self.rows.len()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TableReport {
    pub panels: Vec<Panel>,
}

impl TableReport {
    pub fn passed(&self) -> bool {
        self.panels.iter().all(Panel::passed)
    }

    pub fn seconds(&self) -> f64 {
        self.panels.iter().map(|p| p.seconds).sum()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for p in &self.panels {
            let _ = writeln!(
                out,
                "sigma = {}: unpruned GE {:.3} (reference {:.3})",
                p.sigma, p.unpruned_measured, p.unpruned_reference
            );
            let _ = write!(out, "{:>6}", "pct");
            for m in REFERENCE_COLUMNS {
                let _ = write!(out, " | {:^22}", m.id());
            }
            let _ = writeln!(out, " | order");
            for row in &p.rows {
                let _ = write!(out, "{:>5.1}%", row.pct_label);
                for c in &row.cells {
                    let mark = if c.pass { "ok" } else { "XX" };
                    let _ = write!(out, " | {:>6.3} vs {:>6.3} {:>4}", c.measured, c.reference, mark);
                }
                let _ = writeln!(out, " | {}", if row.order_ok { "ok" } else { "XX" });
            }
            let _ = writeln!(
                out,
                "cells within {CELL_TOLERANCE}: {}/{}, column order matches: {}/{}\n",
                p.cells_passed(),
                p.cell_count(),
                p.orders_passed(),
                p.rows.len()
            );
        }
        out
    }
}

fn ascending(methods: &[Method], values: &[f64]) -> Vec<Method> {
    let mut idx: Vec<usize> = (0..methods.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    idx.into_iter().map(|i| methods[i]).collect()
}

/// Whether `cfg` describes the setting the reference values were measured in.
pub fn matches_reference_setting(cfg: &ExperimentConfig) -> bool {
    let d = ExperimentConfig::default();
    cfg.n == d.n
        && cfg.m == d.m
        && cfg.k == d.k
        && cfg.v_star == d.v_star
        && (1..=5).all(|k| cfg.k_n_grid.contains(&k))
        && REFERENCE_COLUMNS.iter().all(|m| cfg.methods.contains(m))
}

/// Compares one experiment's unreweighted summary with a reference panel.
pub fn panel(report: &ExperimentReport, reference: &[[f64; 5]; 5], unpruned_reference: f64) -> Result<Panel> {
    if !matches_reference_setting(&report.config) {
        return Err(Error::InvalidArgument("reference values exist only for the default N, M, K, v* and grids".into()));
    }
    let mut rows = Vec::new();
    for (i, (&pct_label, ref_row)) in REFERENCE_PCT.iter().zip(reference).enumerate() {
        let k_n = i + 1;
        let cells = REFERENCE_COLUMNS
            .iter()
            .zip(ref_row)
            .map(|(&method, &reference)| {
                let rec = report
                    .find(None, method, k_n, false)
                    .ok_or_else(|| Error::Experiment(format!("no summary for {method} at k_n = {k_n}")))?;
                Ok(Cell {
                    method,
                    reference,
                    measured: rec.ge_mean,
                    std: rec.ge_std,
                    pass: (rec.ge_mean - reference).abs() <= CELL_TOLERANCE,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let measured: Vec<f64> = cells.iter().map(|c| c.measured).collect();
        let reference_order = ascending(&REFERENCE_COLUMNS, ref_row);
        let measured_order = ascending(&REFERENCE_COLUMNS, &measured);
        rows.push(Row {
            pct_label,
            k_n,
            order_ok: reference_order == measured_order,
            cells,
            reference_order,
            measured_order,
        });
    }
    let unpruned_measured = report.rounds.iter().map(|r| r.ge_mc.value).sum::<f64>() / report.rounds.len() as f64;
    Ok(Panel { sigma: report.config.sigma, unpruned_reference, unpruned_measured, rows, seconds: report.seconds })
}

/// Builds whichever panels the given reports cover.
pub fn table_from_reports(noiseless: Option<&ExperimentReport>, noisy: Option<&ExperimentReport>) -> Result<TableReport> {
    let mut panels = Vec::new();
    if let Some(r) = noiseless {
        panels.push(panel(r, &NOISELESS_REFERENCE, NOISELESS_UNPRUNED)?);
    }
    if let Some(r) = noisy {
        panels.push(panel(r, &NOISY_REFERENCE, NOISY_UNPRUNED)?);
    }
    Ok(TableReport { panels })
}

/// Runs the noiseless and noisy experiments (without reweighting) on top of
/// `cfg` and compares both with the reference values.
pub fn reproduce_table(cfg: &ExperimentConfig) -> Result<(TableReport, ExperimentReport, ExperimentReport)> {
    if !matches_reference_setting(cfg) {
        return Err(Error::InvalidArgument("reference values exist only for the default N, M, K, v* and grids".into()));
    }
    let clean = ExperimentConfig { sigma: 0.0, reweight: false, ..cfg.clone() };
    let noisy = ExperimentConfig { sigma: NOISY_SIGMA, reweight: false, ..cfg.clone() };
    let clean_report = run_experiment(&clean)?;
    let noisy_report = run_experiment(&noisy)?;
    let table = table_from_reports(Some(&clean_report), Some(&noisy_report))?;
    Ok((table, clean_report, noisy_report))
}
